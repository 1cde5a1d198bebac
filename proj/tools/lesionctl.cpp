// Command-line front end: phantom generation, training, detection,
// segmentation and evaluation.

#include <cstdio>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "lesion/pipeline.hpp"

using namespace lesion;

namespace {

int run_phantom_gen(int count, std::uint64_t seed, const std::string& out) {
  const Manifest m = generate_dataset(count, seed, out);
  std::size_t lesions = 0;
  for (const auto& e : m) lesions += e.lesions.size();
  std::cout << "wrote " << m.size() << " volumes (" << lesions << " lesions) to " << out << "\n";
  return 0;
}

int run_train_cascade(const std::string& manifest, int pool, int rounds, std::uint64_t seed,
                      const std::string& out) {
  const std::vector<Phantom> data = load_dataset(read_manifest(manifest));
  DetectorTrainOptions opt;
  opt.seed = seed;
  opt.haar_pool_size = pool;
  opt.haar_rounds = opt.ray_rounds = opt.scorer_rounds = rounds;
  DetectorTrainLog log;
  ModelBundle b;
  b.seed = seed;
  b.detector = train_detector(data, opt, &log);
  save_bundle(b, out);
  for (std::size_t s = 0; s < log.stages.size(); ++s) {
    const auto& r = log.stages[s];
    std::cout << "stage " << s << ": " << r.input_count << " in, " << r.survivors
              << " survive, recall " << r.recall << "\n";
  }
  for (const auto& w : log.warnings) std::cerr << "warning: " << w << "\n";
  std::cout << "scorer: " << log.scorer_positives << " positive / " << log.scorer_negatives
            << " negative rough segments\nwrote " << out << "\n";
  return 0;
}

int run_train_cnn(const std::string& manifest, int epochs, double lr, std::uint64_t seed,
                  const std::string& bundle_path) {
  ModelBundle b = load_bundle(bundle_path);
  const std::vector<Phantom> data = load_dataset(read_manifest(manifest));
  CnnTrainOptions opt;
  opt.seed = seed;
  opt.sgd.epochs = epochs;
  opt.sgd.learning_rate = lr;
  opt.segment = b.segment;
  const TrainResult r = train_cnn(data, opt);
  b.cnn = r.net;
  save_bundle(b, bundle_path);
  std::cout << "loss " << r.initial_loss << " -> "
            << (r.loss_curve.empty() ? r.initial_loss : r.loss_curve.back()) << "\nupdated "
            << bundle_path << "\n";
  return 0;
}

int run_detect(const std::string& volume, const std::string& bundle_path, double tau,
               const std::string& out) {
  const ModelBundle b = load_bundle(bundle_path);
  const Volume3 v = read_volume(volume);
  DetectorConfig cfg = b.detector.config;
  cfg.tau = tau;
  const DetectionRun run = detect_lesions(v, b.detector, cfg);
  std::vector<DetectionRecord> recs;
  const std::string id = std::filesystem::path(volume).stem().string();
  for (const auto& c : run.detections) recs.push_back({c.center, c.box, c.score, id});
  std::ofstream os(out);
  if (!os) throw IoError("cannot write " + out);
  write_detections(os, recs);
  std::cout << "C0 " << run.counts.c0 << "  C1 " << run.counts.c1 << "  C2 " << run.counts.c2
            << "  C3 " << run.counts.c3 << "  D " << run.counts.d << "\n";
  return 0;
}

int run_segment(const std::string& volume, const std::string& detections,
                const std::string& bundle_path, const std::string& out_dir) {
  const ModelBundle b = load_bundle(bundle_path);
  if (!b.cnn) throw ConfigError("bundle has no CNN; run `train cnn` first");
  const Volume3 v = read_volume(volume);
  std::ifstream is(detections);
  if (!is) throw IoError("cannot read " + detections);
  const std::vector<DetectionRecord> recs = read_detections(is);
  std::filesystem::create_directories(out_dir);
  for (std::size_t k = 0; k < recs.size(); ++k) {
    const int id = static_cast<int>(k) + 1;
    const LesionSegmentation seg = segment_lesion(v, recs[k].box, *b.cnn, b.segment);
    char stem[32];
    std::snprintf(stem, sizeof stem, "lesion_%03d", id);
    const std::filesystem::path dir(out_dir);
    write_mask(seg.mask, dir / (std::string(stem) + ".lsm"));
    nlohmann::ordered_json side = {{"lesion_id", id}, {"per_slice", nlohmann::ordered_json::array()}};
    for (const auto& s : seg.slices) {
      side["per_slice"].push_back({{"z", s.z},
                                   {"iterations", s.iterations},
                                   {"final_lambda1", s.final_lambda1},
                                   {"final_lambda2", s.final_lambda2},
                                   {"window_side", s.window_side}});
    }
    side["warnings"] = seg.warnings;
    std::ofstream os(dir / (std::string(stem) + ".json"));
    if (!os) throw IoError("cannot write sidecar in " + out_dir);
    os << side.dump(2) << "\n";
    for (const auto& w : seg.warnings) std::cerr << "warning: lesion " << id << ": " << w << "\n";
  }
  std::cout << "segmented " << recs.size() << " lesions into " << out_dir << "\n";
  return 0;
}

int run_eval(const std::string& manifest, const std::string& bundle_path, bool manual,
             const std::string& report) {
  const ModelBundle b = load_bundle(bundle_path);
  const EvalReport r = run_pipeline(read_manifest(manifest), b, EvalOptions{manual});
  std::ofstream os(report);
  if (!os) throw IoError("cannot write " + report);
  os << r.to_json().dump(2) << "\n";
  std::cout << "sensitivity " << r.match.sensitivity() << "  fp/volume " << r.match.fp_per_volume()
            << "  dice " << r.seg.mean() << " +- " << r.seg.stddev() << " (n=" << r.seg.dice.size()
            << ")\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Lesion detection and segmentation toolkit"};
  app.require_subcommand(1);

  int count = 0;
  std::uint64_t seed = 0;
  std::string out, manifest, bundle, volume, detections, out_dir, report;
  int pool = 400, rounds = 40, epochs = 12;
  double lr = 0.01, tau = 0.5;
  bool manual = false;

  auto* phantom = app.add_subcommand("phantom", "synthetic data");
  phantom->require_subcommand(1);
  auto* gen = phantom->add_subcommand("gen", "write N phantom volumes plus manifest.json");
  gen->add_option("--count", count, "number of volumes")->required()->check(CLI::PositiveNumber);
  gen->add_option("--seed", seed, "root seed")->required();
  gen->add_option("--out", out, "output directory")->required();

  auto* train = app.add_subcommand("train", "model training");
  train->require_subcommand(1);
  auto* cascade = train->add_subcommand("cascade", "organ models, detection cascade and scorer");
  cascade->add_option("--manifest", manifest)->required();
  cascade->add_option("--pool-size", pool, "lesion Haar pool size")->check(CLI::PositiveNumber);
  cascade->add_option("--rounds", rounds, "boosting rounds per stage")->check(CLI::PositiveNumber);
  cascade->add_option("--seed", seed)->required();
  cascade->add_option("--out", out, "bundle to write")->required();
  auto* cnn = train->add_subcommand("cnn", "train the contour CNN into an existing bundle");
  cnn->add_option("--manifest", manifest)->required();
  cnn->add_option("--epochs", epochs)->check(CLI::PositiveNumber);
  cnn->add_option("--lr", lr)->check(CLI::PositiveNumber);
  cnn->add_option("--seed", seed)->required();
  cnn->add_option("--bundle", bundle)->required();

  auto* detect = app.add_subcommand("detect", "detect lesions in one volume");
  detect->add_option("--volume", volume)->required();
  detect->add_option("--bundle", bundle)->required();
  detect->add_option("--tau", tau, "score threshold")->capture_default_str();
  detect->add_option("--out", out, "JSON-lines detections")->required();

  auto* segment = app.add_subcommand("segment", "segment detections of one volume");
  segment->add_option("--volume", volume)->required();
  segment->add_option("--detections", detections)->required();
  segment->add_option("--bundle", bundle)->required();
  segment->add_option("--out-dir", out_dir)->required();

  auto* eval = app.add_subcommand("eval", "detect, segment and score a manifest");
  eval->add_option("--manifest", manifest)->required();
  eval->add_option("--bundle", bundle)->required();
  eval->add_flag("--manual-init", manual, "segment from ground-truth boxes");
  eval->add_option("--report", report)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*gen) return run_phantom_gen(count, seed, out);
    if (*cascade) return run_train_cascade(manifest, pool, rounds, seed, out);
    if (*cnn) return run_train_cnn(manifest, epochs, lr, seed, bundle);
    if (*detect) return run_detect(volume, bundle, tau, out);
    if (*segment) return run_segment(volume, detections, bundle, out_dir);
    if (*eval) return run_eval(manifest, bundle, manual, report);
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 2;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
