#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include <json.hpp>
#include "seg3d/engine.hpp"
#include "seg3d/plan.hpp"
#include "seg3d/volume.hpp"

namespace {

using namespace seg3d;

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RunError("cannot open '" + path + "' for writing");
  out << text;
  if (!out) throw RunError("write failed for '" + path + "'");
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw DataError("failed reading '" + path + "'");
  return text;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Self-configuring 3D semantic segmentation: fingerprint, plan, train, predict, eval"};
  app.require_subcommand(1);

  std::string dataset_dir, out_path, fingerprint_path, plan_path;
  std::string model_path, input_path, output_path, pred_path, ref_path;
  int64_t iters = 30000;
  int64_t batch = 4;
  uint64_t seed = 0;

  CLI::App* c_fp = app.add_subcommand("fingerprint", "Summarize a dataset into a fingerprint JSON");
  c_fp->add_option("--dataset", dataset_dir, "Dataset directory containing manifest.json")->required();
  c_fp->add_option("--out", out_path, "Fingerprint JSON output path")->required();

  CLI::App* c_plan = app.add_subcommand("plan", "Derive a task plan from a fingerprint");
  c_plan->add_option("--fingerprint", fingerprint_path, "Fingerprint JSON path")->required();
  c_plan->add_option("--out", out_path, "Plan JSON output path")->required();

  CLI::App* c_train = app.add_subcommand("train", "Train a model from a dataset and plan");
  c_train->add_option("--dataset", dataset_dir, "Dataset directory containing manifest.json")->required();
  c_train->add_option("--plan", plan_path, "Plan JSON path")->required();
  c_train->add_option("--out", out_path, "Checkpoint output path")->required();
  c_train->add_option("--iters", iters, "Training iterations")->capture_default_str();
  c_train->add_option("--batch", batch, "Batch size")->capture_default_str();
  c_train->add_option("--seed", seed, "Run seed")->capture_default_str();

  CLI::App* c_pred = app.add_subcommand("predict", "Segment a volume with a trained model");
  c_pred->add_option("--model", model_path, "Checkpoint path")->required();
  c_pred->add_option("--input", input_path, "Input image volume (SVF)")->required();
  c_pred->add_option("--output", output_path, "Output label map (SVF)")->required();

  CLI::App* c_eval = app.add_subcommand("eval", "Per-class overlap between two label maps");
  c_eval->add_option("--pred", pred_path, "Predicted label map (SVF)")->required();
  c_eval->add_option("--ref", ref_path, "Reference label map (SVF)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (c_fp->parsed()) {
      const DatasetManifest manifest =
          load_manifest(std::filesystem::path(dataset_dir) / "manifest.json");
      const DatasetFingerprint fp = compute_fingerprint(manifest);
      write_text(out_path, fingerprint_to_json(fp));
      std::cout << "fingerprint: " << fp.case_count << " cases, " << fp.class_count
                << " classes, median spacing (" << fp.median_spacing[0] << ", "
                << fp.median_spacing[1] << ", " << fp.median_spacing[2] << ") mm, median shape ("
                << fp.median_shape[0] << ", " << fp.median_shape[1] << ", " << fp.median_shape[2]
                << ")\n";
    } else if (c_plan->parsed()) {
      const DatasetFingerprint fp = fingerprint_from_json(read_text(fingerprint_path));
      write_text(out_path, plan_to_json(make_plan(fp)));
    } else if (c_train->parsed()) {
      const DatasetManifest manifest =
          load_manifest(std::filesystem::path(dataset_dir) / "manifest.json");
      const TaskPlan plan = plan_from_json(read_text(plan_path));
      TrainConfig cfg;
      cfg.iterations = iters;
      cfg.batch_size = batch;
      cfg.seed = seed;
      const Checkpoint ckpt = train(manifest, plan, cfg, &std::cout);
      save_checkpoint(ckpt, out_path);
    } else if (c_pred->parsed()) {
      const Checkpoint ckpt = load_checkpoint(model_path);
      const Volume image = read_image(input_path);
      write_volume(predict(ckpt, image), output_path);
    } else if (c_eval->parsed()) {
      const DiceReport rep = dice_scores(read_labels(pred_path), read_labels(ref_path));
      nlohmann::ordered_json j;
      for (size_t c = 0; c < rep.per_class.size(); ++c)
        j[std::to_string(c + 1)] = rep.per_class[c];
      j["mean_foreground"] = rep.mean_foreground;
      std::cout << j.dump() << "\n";
    }
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const RunError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
