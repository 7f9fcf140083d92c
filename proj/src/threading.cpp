#include "splatflow/threading.hpp"

#include <atomic>

namespace splatflow {

namespace {
std::atomic<int> g_default_threads{
    static_cast<int>(std::max(1u, std::thread::hardware_concurrency()))};
}  // namespace

int default_threads() { return g_default_threads.load(); }
void set_default_threads(int n) { g_default_threads.store(std::max(1, n)); }

}  // namespace splatflow
