#include <cstdio>

int main() {
    std::puts("vdyn: cli under construction");
    return 0;
}
