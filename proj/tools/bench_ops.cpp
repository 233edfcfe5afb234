// Rough throughput numbers for the hot ops and the full training step;
// used to size desk-scale defaults, not part of the test suite.

#include <chrono>
#include <cstdio>

#include "crowd/episodes.hpp"
#include "crowd/eval.hpp"
#include "crowd/guidance.hpp"
#include "crowd/trainer.hpp"

using namespace crowd;
using Clock = std::chrono::steady_clock;

static double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

int main() {
    Rng rng(7);

    { // conv forward/backward throughput at training-time sizes
        Tensor x(Shape{32, 48, 48});
        for (std::size_t i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
        Tensor w(Shape{32, 32, 3, 3});
        for (std::size_t i = 0; i < w.size(); ++i) w.data()[i] = rng.normal();
        x.set_requires_grad();
        w.set_requires_grad();
        const int reps = 200;
        auto t0 = Clock::now();
        double sink = 0.0;
        for (int r = 0; r < reps; ++r) {
            GradTape tape;
            Tensor y = conv2d(x, w, {1, 1, 1});
            Tensor loss = sum_all(y);
            tape.backward(loss);
            sink += loss.item();
            x.zero_grad();
            w.zero_grad();
        }
        const double dt = seconds_since(t0);
        const double macs = 2.0 * 3.0 * static_cast<double>(reps) * 32 * 48 * 48 * 32 * 9;
        std::printf("conv2d 32x48x48 (fwd+bwd): %.1f ms/rep, %.2f GFLOP/s (sink %g)\n",
                    1e3 * dt / reps, macs / dt / 1e9, sink);
    }

    { // one full training iteration at default settings
        TrainConfig cfg;
        cfg.iterations = 8;
        cfg.batch = 8;
        BenchmarkLayout layout;
        SyntheticBenchmark bench = make_synthetic_benchmark(layout, Rng(11));
        auto t0 = Clock::now();
        TrainResult res = train_base(bench.train, cfg, 3);
        const double dt = seconds_since(t0);
        std::printf("train_base: %.1f ms/iteration at batch %zu (loss[0]=%.3f loss[%zu]=%.3f)\n",
                    1e3 * dt / cfg.iterations, cfg.batch, res.trace.front().loss,
                    res.trace.size() - 1, res.trace.back().loss);
        std::printf("projected 2000 iters: %.1f min\n", dt / cfg.iterations * 2000.0 / 60.0);
    }
    return 0;
}
