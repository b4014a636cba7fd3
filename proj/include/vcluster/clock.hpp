#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <memory>

namespace vcluster {

// Monotonic time source, injectable so TTL bookkeeping can be driven
// synthetically in tests and in --mock-clock mode.
class Clock {
public:
    virtual ~Clock() = default;
    virtual int64_t now_ms() = 0;
};

class SteadyClock final : public Clock {
public:
    int64_t now_ms() override {
        auto d = std::chrono::steady_clock::now().time_since_epoch();
        return std::chrono::duration_cast<std::chrono::milliseconds>(d).count();
    }
};

// Starts at 0 and only moves when advanced.
class ManualClock final : public Clock {
public:
    int64_t now_ms() override { return now_.load(); }
    void advance_ms(int64_t ms) { now_.fetch_add(ms); }
    void set_ms(int64_t ms) { now_.store(ms); }

private:
    std::atomic<int64_t> now_{0};
};

} // namespace vcluster
