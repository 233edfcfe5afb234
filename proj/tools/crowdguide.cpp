#include <cstdio>

int main() {
    std::printf("crowdguide CLI placeholder\n");
    return 0;
}
