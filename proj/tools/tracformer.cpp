#include <cstdio>

int main() {
  std::puts("tracformer: subcommands not wired up yet");
  return 2;
}
