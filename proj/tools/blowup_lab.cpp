#include <cstdio>

int main() {
    std::puts("blowup-lab: command-line interface not wired up yet");
    return 2;
}
