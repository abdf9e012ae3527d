#include <cstdio>

int main() {
  std::puts("dynser: subcommands not wired up yet");
  return 1;
}
