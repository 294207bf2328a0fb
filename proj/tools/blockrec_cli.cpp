#include <cstdio>

int main() {
  std::puts("blockrec: CLI not wired up yet");
  return 0;
}
