#include <iostream>

int main() {
  std::cout << "kgd: subcommands not wired yet\n";
  return 1;
}
