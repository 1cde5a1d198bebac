#include "lesion/bundle.hpp"

#include <fstream>
#include <sstream>

namespace lesion {

using ojson = nlohmann::ordered_json;
using json = nlohmann::json;

namespace {

ojson idx_json(const Index3& p) { return ojson::array({p.x, p.y, p.z}); }
Index3 idx_from(const json& j) { return {j.at(0).get<int>(), j.at(1).get<int>(), j.at(2).get<int>()}; }

ojson pool_json(const std::vector<HaarSpec>& pool) {
  ojson out = ojson::array();
  for (const auto& spec : pool) {
    ojson boxes = ojson::array();
    for (const auto& b : spec.boxes) {
      boxes.push_back({{"lo", idx_json(b.lo)}, {"hi", idx_json(b.hi)}, {"weight", b.weight}});
    }
    out.push_back({{"boxes", boxes}, {"normalize", spec.normalize}});
  }
  return out;
}

std::vector<HaarSpec> pool_from(const json& j) {
  std::vector<HaarSpec> pool;
  for (const auto& s : j) {
    HaarSpec spec;
    spec.normalize = s.at("normalize").get<bool>();
    for (const auto& b : s.at("boxes")) {
      spec.boxes.push_back({idx_from(b.at("lo")), idx_from(b.at("hi")), b.at("weight").get<int>()});
    }
    pool.push_back(std::move(spec));
  }
  return pool;
}

ojson vec3_json(const Vec3& v) { return ojson::array({v[0], v[1], v[2]}); }
Vec3 vec3_from(const json& j) { return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()}; }

}  // namespace

ojson to_json(const SegmentConfig& c) {
  return {{"reinit_every", c.reinit_every},
          {"cnn_every", c.cnn_every},
          {"max_iterations", c.max_iterations},
          {"convergence_fraction", c.convergence_fraction},
          {"convergence_checks", c.convergence_checks},
          {"band_width", c.band_width},
          {"mu_factor", c.mu_factor},
          {"smoothing_sigma", c.smoothing_sigma},
          {"intensity_floor_hu", c.intensity_floor_hu},
          {"slice_padding", c.slice_padding},
          {"slice_padding_z", c.slice_padding_z},
          {"dt_max", c.dt_max},
          {"single_component", c.single_component},
          {"reject_outside", c.reject_outside}};
}

SegmentConfig segment_config_from_json(const json& j) {
  SegmentConfig c;
  c.reinit_every = j.at("reinit_every").get<int>();
  c.cnn_every = j.at("cnn_every").get<int>();
  c.max_iterations = j.at("max_iterations").get<int>();
  c.convergence_fraction = j.at("convergence_fraction").get<double>();
  c.convergence_checks = j.at("convergence_checks").get<int>();
  c.band_width = j.at("band_width").get<double>();
  c.mu_factor = j.at("mu_factor").get<double>();
  c.smoothing_sigma = j.at("smoothing_sigma").get<double>();
  c.intensity_floor_hu = j.at("intensity_floor_hu").get<double>();
  c.slice_padding = j.at("slice_padding").get<int>();
  c.slice_padding_z = j.at("slice_padding_z").get<int>();
  c.dt_max = j.at("dt_max").get<double>();
  c.single_component = j.at("single_component").get<bool>();
  c.reject_outside = j.at("reject_outside").get<bool>();
  return c;
}

ojson to_json(const StrongClassifier& c) {
  ojson stumps = ojson::array();
  for (const auto& ws : c.stumps) {
    stumps.push_back({{"feature", ws.stump.feature},
                      {"threshold", ws.stump.threshold},
                      {"polarity", ws.stump.polarity},
                      {"alpha", ws.alpha}});
  }
  return {{"stumps", stumps}, {"calibration", {{"a", c.calibration.a}, {"b", c.calibration.b}}}};
}

StrongClassifier classifier_from_json(const json& j) {
  StrongClassifier c;
  for (const auto& s : j.at("stumps")) {
    WeightedStump ws;
    ws.stump.feature = s.at("feature").get<int>();
    ws.stump.threshold = s.at("threshold").get<double>();
    ws.stump.polarity = s.at("polarity").get<int>();
    ws.alpha = s.at("alpha").get<double>();
    if (ws.stump.feature < 0 || (ws.stump.polarity != 1 && ws.stump.polarity != -1)) {
      throw ConfigError("malformed stump in classifier");
    }
    c.stumps.push_back(ws);
  }
  c.calibration.a = j.at("calibration").at("a").get<double>();
  c.calibration.b = j.at("calibration").at("b").get<double>();
  return c;
}

ojson to_json(const ConvNet& net) {
  ojson spec = {{"input", net.spec.input},
                {"conv1_maps", net.spec.conv1_maps},
                {"conv2_maps", net.spec.conv2_maps},
                {"fc_width", net.spec.fc_width},
                {"leaky_slope", net.spec.leaky_slope},
                {"kernel", NetSpec::kKernel},
                {"classes", NetSpec::kClasses}};
  ojson params;
  const auto blocks = net.blocks();
  for (int i = 0; i < ConvNet::kBlocks; ++i) params[std::string(ConvNet::kBlockNames[i])] = *blocks[i];
  return {{"spec", spec}, {"layer_order", ConvNet::kBlockNames}, {"params", params}};
}

ConvNet convnet_from_json(const json& j) {
  const auto& s = j.at("spec");
  if (s.at("kernel").get<int>() != NetSpec::kKernel || s.at("classes").get<int>() != NetSpec::kClasses) {
    throw ConfigError("CNN kernel size or class count does not match this build");
  }
  NetSpec spec;
  spec.input = s.at("input").get<int>();
  spec.conv1_maps = s.at("conv1_maps").get<int>();
  spec.conv2_maps = s.at("conv2_maps").get<int>();
  spec.fc_width = s.at("fc_width").get<int>();
  spec.leaky_slope = s.at("leaky_slope").get<double>();
  spec.validate();
  ConvNet net = ConvNet::zeros(spec);
  auto blocks = net.blocks();
  for (int i = 0; i < ConvNet::kBlocks; ++i) {
    const std::string name(ConvNet::kBlockNames[i]);
    auto values = j.at("params").at(name).get<std::vector<double>>();
    if (values.size() != blocks[i]->size()) {
      throw ConfigError("CNN block " + name + " has " + std::to_string(values.size()) +
                        " values, expected " + std::to_string(blocks[i]->size()));
    }
    *blocks[i] = std::move(values);
  }
  return net;
}

ojson to_json(const DetectorConfig& c) {
  return {{"tau", c.tau},
          {"hu_window", {c.hu_lo, c.hu_hi}},
          {"stride", c.stride},
          {"nms_radius_mm", c.nms_radius_mm},
          {"ray_range", c.ray_range},
          {"rough_max_radius", c.rough_max_radius},
          {"rough_floor_hu", c.rough_floor_hu},
          {"recenter", c.recenter}};
}

DetectorConfig detector_config_from_json(const json& j) {
  DetectorConfig c;
  c.tau = j.at("tau").get<double>();
  c.hu_lo = j.at("hu_window").at(0).get<double>();
  c.hu_hi = j.at("hu_window").at(1).get<double>();
  c.stride = j.at("stride").get<int>();
  c.nms_radius_mm = j.at("nms_radius_mm").get<double>();
  c.ray_range = j.at("ray_range").get<int>();
  c.rough_max_radius = j.at("rough_max_radius").get<int>();
  c.rough_floor_hu = j.at("rough_floor_hu").get<double>();
  c.recenter = j.at("recenter").get<bool>();
  c.validate();
  return c;
}

ojson to_json(const ModelBundle& b) {
  const DetectorModels& d = b.detector;
  ojson organ = {{"pool", pool_json(d.organ.pool)},
                 {"extent", d.organ.extent},
                 {"ref_radii", vec3_json(d.organ.ref_radii)},
                 {"position_scale", d.organ.position_scale},
                 {"scales", d.organ.scales},
                 {"grid_stride", d.organ.grid_stride},
                 {"top_k", d.organ.top_k},
                 {"box_margin", d.organ.box_margin},
                 {"position", to_json(d.organ.position)},
                 {"scale", to_json(d.organ.scale)}};
  ojson cascade = ojson::array();
  for (const auto& st : d.cascade) {
    cascade.push_back({{"extractor", st.extractor},
                       {"reject_threshold", st.reject_threshold},
                       {"classifier", to_json(st.classifier)}});
  }
  ojson j = {{"version", b.version},
             {"seed", b.seed},
             {"config", to_json(d.config)},
             {"segment", to_json(b.segment)},
             {"organ", organ},
             {"haar_pool", pool_json(d.haar_pool)},
             {"cascade", cascade},
             {"scorer", to_json(d.scorer)}};
  j["cnn"] = b.cnn ? to_json(*b.cnn) : ojson(nullptr);
  return j;
}

ModelBundle bundle_from_json(const json& j) {
  if (!j.is_object() || !j.contains("version") || !j.at("version").is_string()) {
    throw IncompatibleVersionError("model bundle carries no version string");
  }
  const std::string version = j.at("version").get<std::string>();
  if (version != kBundleVersion) {
    throw IncompatibleVersionError("model bundle version " + version + " is incompatible with " +
                                   kBundleVersion);
  }
  ModelBundle b;
  try {
    b.seed = j.at("seed").get<std::uint64_t>();
    DetectorModels& d = b.detector;
    d.config = detector_config_from_json(j.at("config"));
    b.segment = segment_config_from_json(j.at("segment"));
    const auto& o = j.at("organ");
    d.organ.pool = pool_from(o.at("pool"));
    d.organ.extent = o.at("extent").get<int>();
    d.organ.ref_radii = vec3_from(o.at("ref_radii"));
    d.organ.position_scale = o.at("position_scale").get<double>();
    d.organ.scales = o.at("scales").get<std::vector<double>>();
    d.organ.grid_stride = o.at("grid_stride").get<int>();
    d.organ.top_k = o.at("top_k").get<int>();
    d.organ.box_margin = o.at("box_margin").get<double>();
    d.organ.position = classifier_from_json(o.at("position"));
    d.organ.scale = classifier_from_json(o.at("scale"));
    d.haar_pool = pool_from(j.at("haar_pool"));
    for (const auto& st : j.at("cascade")) {
      d.cascade.push_back({st.at("extractor").get<std::string>(), classifier_from_json(st.at("classifier")),
                           st.at("reject_threshold").get<double>()});
    }
    d.scorer = classifier_from_json(j.at("scorer"));
    if (!j.at("cnn").is_null()) b.cnn = convnet_from_json(j.at("cnn"));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed model bundle: ") + e.what());
  }
  b.detector.validate();
  return b;
}

void save_bundle(const ModelBundle& b, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write bundle: " + path.string());
  os << to_json(b).dump(1) << '\n';
  if (!os) throw IoError("failed writing bundle: " + path.string());
}

ModelBundle load_bundle(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read bundle: " + path.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::parse_error& e) {
    throw FormatError("bundle is not valid JSON: " + path.string() + ": " + e.what());
  }
  return bundle_from_json(j);
}

}  // namespace lesion
