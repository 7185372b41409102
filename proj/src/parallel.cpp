#include "parallel.hpp"

namespace saefin {

namespace {
std::size_t g_jobs = 0;
}

void set_default_jobs(std::size_t jobs) { g_jobs = jobs; }

std::size_t default_jobs() {
    if (g_jobs != 0) return g_jobs;
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : hw;
}

}  // namespace saefin
