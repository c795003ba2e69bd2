// Throughput and convergence probe on the synthetic scene; not part of ctest.
#include <chrono>
#include <cstdio>
#include <cstdlib>

#include "synthetic.hpp"

int main(int argc, char** argv) {
  using namespace marf;
  const double seconds = argc > 1 ? std::atof(argv[1]) : 30.0;
  const int batch = argc > 2 ? std::atoi(argv[2]) : 1024;
  const int samples = argc > 3 ? std::atoi(argv[3]) : 128;
  const auto t0 = std::chrono::steady_clock::now();
  const auto scene = testing::circle_scene();
  std::printf("scene built in %.2fs\n", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());

  TrainConfig cfg;
  cfg.max_seconds = seconds;
  cfg.batch_rays = batch;
  cfg.samples = samples;
  cfg.seed = 1;
  cfg.checkpoint_seconds = {5, 10, 30, 60, 120, 300};
  TrainCallbacks cb;
  cb.on_checkpoint = [&](const Checkpoint& ck, double mark) {
    const auto e0 = std::chrono::steady_clock::now();
    const double p = evaluate_psnr(ck, scene.heldout);
    std::printf("t=%5.0fs step=%6llu heldout=%.2f dB running=%.2f (eval %.2fs)\n", mark,
                static_cast<unsigned long long>(ck.step), p, ck.running_psnr,
                std::chrono::duration<double>(std::chrono::steady_clock::now() - e0).count());
    std::fflush(stdout);
  };
  const Checkpoint ck = train(scene.train, cfg, cb);
  std::printf("final step=%llu heldout=%.2f dB\n", static_cast<unsigned long long>(ck.step),
              evaluate_psnr(ck, scene.heldout));
}
