// Generate a small synthetic dataset, train the desk model briefly, score it
// on the held-out sequences and restore one burst.
//
//   quickstart [work_dir] [iterations]

#include <iostream>
#include <string>

#include "darkvrai/checkpoint.hpp"
#include "darkvrai/raw_data.hpp"
#include "darkvrai/train.hpp"

using namespace darkvrai;

int main(int argc, char** argv) {
  const fs::path work = argc > 1 ? argv[1] : "quickstart_work";
  const std::size_t iterations = argc > 2 ? std::stoul(argv[2]) : 200;

  DatasetSpec spec;
  spec.sequences = 10;
  spec.holdout = 2;
  spec.height = spec.width = 64;
  const auto info = make_dataset(work / "data", spec, /*seed=*/1);
  std::cout << "dataset " << info.manifest_hash << "\n";
  const Dataset ds = load_dataset(work / "data");

  DarkVraiModel<float> model(ModelConfig::desk(), /*seed=*/0);
  const auto before = evaluate(model, ds, "test");

  TrainConfig tc;
  tc.iterations = iterations;
  tc.lr_max = 1e-3;
  TrainState<float> state;
  TrainHooks hooks;
  hooks.on_step = [](const LossRow& r) {
    if (r.iter % 50 == 0) std::cout << "iter " << r.iter << " loss " << r.loss << "\n";
  };
  train(model, state, tc, ds, hooks);
  save_checkpoint(work / "checkpoint", model, 0, state.iteration, &state.adam);

  const auto after = evaluate(model, ds, "test");
  std::cout << "held-out PSNR " << before.aggregate.noisy_psnr_db << " dB (noisy) -> " << after.aggregate.psnr_db
            << " dB, SSIM " << before.aggregate.noisy_ssim << " -> " << after.aggregate.ssim << "\n";
  for (const auto& [label, m] : after.by_condition) std::cout << "  " << label << ": " << m.psnr_db << " dB\n";

  // Restore the last frame of the first held-out burst.
  const auto& seq = ds.sequences[ds.indices("test").front()];
  const auto frames = full_frames<float>(seq, model.config().frames);
  const auto restored = model.infer(frames.noisy, seq.condition);
  std::cout << "restored " << seq.condition.label() << " frame: " << shape_string(restored.shape()) << "\n";
}
