// Writes the single-sample inversion fixture used by `mgan invert`:
// an untrained fc-preset model, the update of one full-batch SGD step on one
// synthetic image, the image itself and a matching config.

#include <filesystem>
#include <fstream>
#include <iostream>

#include "mgan/experiment.hpp"

using namespace mgan;
namespace fs = std::filesystem;

int main(int argc, char** argv) {
  if (argc != 2) {
    std::cerr << "usage: mgan_fixture OUT_DIR\n";
    return 2;
  }
  const fs::path dir = argv[1];
  fs::create_directories(dir);
  const int side = 8, classes = 3;
  const float lr = 0.1f;
  const auto spec = presets::fc(classes, side);
  const auto m = build_models(spec, 7).classifier;
  const auto data = synth_dataset(SynthKind::bars, classes, 1, side, 11);
  const ClientDataset one{0, data.subset({1}).images, data.subset({1}).labels, false};
  Rng rng(0);
  const auto u = local_train(m, one, 1, 1, SgdConfig{lr}, rng);

  save_params((dir / "model.flps").string(), m.params());
  save_params((dir / "update.flps").string(), u.delta);
  write_file_bytes((dir / "truth.idx3").string(), encode_idx_images(to_idx(data.subset({1})).first));

  ExperimentConfig cfg;
  cfg.dataset.classes = classes;
  cfg.dataset.side = side;
  cfg.model.preset = "fc";
  cfg.federated.samples_per_client = 1;
  cfg.inversion.gamma = 0.1;  // = lr
  cfg.inversion.lambda = 0;
  cfg.inversion.representatives = 1;
  cfg.inversion.classes_per_client = 1;
  cfg.inversion.lbfgs.max_iterations = 500;
  cfg.inversion.lbfgs.grad_tolerance = 1e-12;
  cfg.inversion.lbfgs.f_rel_tolerance = 0;
  json j = to_json(cfg);
  json keep;
  for (const char* s : {"dataset", "model", "inversion"}) keep[s] = j[s];
  keep["dataset"] = {{"classes", classes}, {"side", side}};
  keep["federated"] = {{"samples_per_client", 1}, {"classes_per_client", 1}};
  std::ofstream((dir / "config.json").string()) << keep.dump(2) << '\n';
  std::cout << "wrote fixture to " << dir << '\n';
  return 0;
}
