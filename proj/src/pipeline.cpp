#include "lesion/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "lesion/random.hpp"

namespace lesion {

std::vector<Phantom> load_dataset(const Manifest& m) {
  std::vector<Phantom> out;
  out.reserve(m.size());
  for (const auto& e : m) out.push_back({read_volume(e.volume), load_truth(e)});
  return out;
}

std::vector<Phantom> synth_dataset(int count, std::uint64_t seed, const std::string& stream) {
  std::vector<Phantom> out;
  for (int i = 0; i < count; ++i) {
    out.push_back(generate_phantom(default_phantom_spec(derive_seed(seed, stream, i))));
  }
  return out;
}

OrganTruth organ_truth(const BoxRegion& b, const Vec3& ref) {
  OrganTruth t;
  t.center = {(b.min.x + b.max.x) / 2, (b.min.y + b.max.y) / 2, (b.min.z + b.max.z) / 2};
  t.scale = ((b.max.x - b.min.x + 1) / (2.0 * ref[0]) + (b.max.y - b.min.y + 1) / (2.0 * ref[1]) +
             (b.max.z - b.min.z + 1) / (2.0 * ref[2])) /
            3.0;
  return t;
}

namespace {

int chebyshev(const Index3& a, const Index3& b) {
  return std::max({std::abs(a.x - b.x), std::abs(a.y - b.y), std::abs(a.z - b.z)});
}

template <typename T>
void keep_random(std::vector<T>& v, std::size_t n, Rng& rng) {
  if (v.size() <= n) return;
  std::shuffle(v.begin(), v.end(), rng);
  v.resize(n);
}

// Normalized distance of p to the nearest lesion ellipsoid (box-derived).
double lesion_radius(const Index3& p, const std::vector<BoxRegion>& boxes) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& b : boxes) {
    const double dx = (p.x - 0.5 * (b.min.x + b.max.x)) / (0.5 * (b.max.x - b.min.x) + 0.5);
    const double dy = (p.y - 0.5 * (b.min.y + b.max.y)) / (0.5 * (b.max.y - b.min.y) + 0.5);
    const double dz = (p.z - 0.5 * (b.min.z + b.max.z)) / (0.5 * (b.max.z - b.min.z) + 0.5);
    best = std::min(best, std::sqrt(dx * dx + dy * dy + dz * dz));
  }
  return best;
}

std::vector<double> default_scales() {
  std::vector<double> s;
  for (int i = 0; i <= 16; ++i) s.push_back(0.6 + 0.05 * i);
  return s;
}

void append(FeatureMatrix& fm, std::vector<int>& y, const std::vector<double>& row, int label) {
  fm.append_row(row);
  y.push_back(label);
}

}  // namespace

OrganModels train_organ_models(std::span<const Phantom> data, const DetectorTrainOptions& opt,
                               DetectorTrainLog* log) {
  OrganModels m;
  m.pool = sample_haar_pool(derive_seed(opt.seed, "organ.pool"), opt.organ_pool_size, m.extent,
                            m.extent);
  m.scales = default_scales();

  // Organ-free volumes supply the "nothing here" negatives.
  std::vector<Phantom> empties;
  for (int i = 0; i < 2; ++i) {
    PhantomSpec spec = default_phantom_spec(derive_seed(opt.seed, "organ.empty", i));
    spec.organ.reset();
    spec.lesions.clear();
    empties.push_back(generate_phantom(spec));
  }

  FeatureMatrix pos_x, scale_x;
  std::vector<int> pos_y, scale_y;
  bool any = false;
  auto collect = [&](const Phantom& ph, std::size_t index, bool has_organ) {
    const IntegralVolume iv = build_integral(ph.volume);
    const Dims3& d = ph.volume.dims();
    Rng rng(derive_seed(opt.seed, has_organ ? "organ.neg" : "organ.empty.neg", index));
    std::vector<Index3> far, near;
    OrganTruth t;
    if (has_organ) t = organ_truth(*ph.truth.organ_box, m.ref_radii);
    for (int z = 0; z < d.nz; z += 2) {
      for (int y = 0; y < d.ny; y += 2) {
        for (int x = 0; x < d.nx; x += 2) {
          const Index3 p{x, y, z};
          if (!has_organ) {
            far.push_back(p);
            continue;
          }
          const int c = chebyshev(p, t.center);
          if (c > 12) far.push_back(p);
          else if (c > 4) near.push_back(p);
        }
      }
    }
    keep_random(far, 150, rng);
    keep_random(near, 100, rng);
    for (const auto& p : far) append(pos_x, pos_y, organ_features(iv, p, m, m.position_scale), -1);
    for (const auto& p : near) append(pos_x, pos_y, organ_features(iv, p, m, m.position_scale), -1);
    if (!has_organ) return;
    for (int dz = -1; dz <= 1; ++dz) {
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const Index3 p{t.center.x + dx, t.center.y + dy, t.center.z + dz};
          if (!d.contains(p)) continue;
          append(pos_x, pos_y, organ_features(iv, p, m, m.position_scale), 1);
          if (std::abs(dx) + std::abs(dy) + std::abs(dz) > 1) continue;
          append(scale_x, scale_y, organ_features(iv, p, m, t.scale), 1);
          for (double s : m.scales) {
            if (std::abs(s - t.scale) >= 0.12) append(scale_x, scale_y, organ_features(iv, p, m, s), -1);
          }
        }
      }
    }
  };
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (!data[i].truth.organ_box) continue;
    any = true;
    collect(data[i], i, true);
  }
  if (!any) throw ValidationError("organ training data has no organ boxes");
  for (std::size_t i = 0; i < empties.size(); ++i) collect(empties[i], i, false);

  m.position = train_adaboost(pos_x, pos_y, opt.organ_rounds);
  m.scale = train_adaboost(scale_x, scale_y, opt.organ_rounds);
  if (log) {
    log->organ_positives = static_cast<std::size_t>(std::count(pos_y.begin(), pos_y.end(), 1));
    log->organ_negatives = pos_y.size() - log->organ_positives;
  }
  return m;
}

DetectorModels train_detector(std::span<const Phantom> data, const DetectorTrainOptions& opt,
                              DetectorTrainLog* log) {
  DetectorTrainLog local_log;
  DetectorTrainLog& lg = log ? *log : local_log;
  opt.config.validate();
  DetectorModels models;
  models.config = opt.config;
  models.organ = train_organ_models(data, opt, &lg);
  if (data.empty()) throw ValidationError("no training volumes");
  const Spacing3 sp = data.front().volume.spacing();
  const int ext_z = std::max(1, static_cast<int>(std::lround(opt.haar_extent * sp.sx / sp.sz)));
  models.haar_pool =
      sample_haar_pool(derive_seed(opt.seed, "lesion.pool"), opt.haar_pool_size, opt.haar_extent, ext_z);

  // Training ROIs come from the true organ box, sized like detected ones.
  std::vector<IntegralVolume> ivs;
  std::vector<BoxRegion> rois;
  for (const auto& ph : data) {
    ivs.push_back(build_integral(ph.volume));
    if (ph.truth.organ_box) {
      const OrganTruth t = organ_truth(*ph.truth.organ_box, models.organ.ref_radii);
      rois.push_back(organ_roi_box(t.center, t.scale, models.organ, ph.volume.dims()));
    } else {
      rois.push_back({{0, 0, 0}, {ph.volume.dims().nx - 1, ph.volume.dims().ny - 1, ph.volume.dims().nz - 1}});
    }
  }

  struct Sample {
    std::size_t volume;
    Index3 center;
  };
  std::vector<Sample> samples;
  std::vector<int> labels;
  for (std::size_t i = 0; i < data.size(); ++i) {
    std::vector<Index3> neg;
    for (const Candidate& c : seed_candidates(data[i].volume, rois[i], opt.config)) {
      const double r = lesion_radius(c.center, data[i].truth.boxes);
      if (r <= opt.core_radius) {
        samples.push_back({i, c.center});
        labels.push_back(1);
      } else if (r > opt.exclusion_radius && data[i].truth.mask[c.center] == 0) {
        neg.push_back(c.center);
      }
    }
    Rng rng(derive_seed(opt.seed, "cascade.neg", i));
    keep_random(neg, static_cast<std::size_t>(opt.negatives_per_volume), rng);
    std::sort(neg.begin(), neg.end());
    for (const auto& p : neg) {
      samples.push_back({i, p});
      labels.push_back(-1);
    }
  }
  lg.cascade_positives = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  lg.cascade_negatives = labels.size() - lg.cascade_positives;
  if (lg.cascade_positives == 0) throw ValidationError("training data contains no lesions");

  const std::vector<StageSpec> stages{{"haar", opt.haar_rounds, opt.stage_recall},
                                      {"ray", opt.ray_rounds, opt.stage_recall}};
  const CascadeTraining ct = train_cascade(
      stages, labels, [&](std::size_t stage, std::span<const std::size_t> rows) {
        FeatureMatrix fm;
        for (std::size_t r : rows) {
          const Sample& s = samples[r];
          if (stages[stage].extractor == "haar") {
            fm.append_row(lesion_haar_features(ivs[s.volume], s.center, models.haar_pool));
          } else {
            fm.append_row(ray_features(data[s.volume].volume, s.center, opt.config.ray_range).values);
          }
        }
        return fm;
      });
  models.cascade = ct.stages;
  lg.stages = ct.reports;
  lg.warnings.insert(lg.warnings.end(), ct.warnings.begin(), ct.warnings.end());

  // Scorer: rough segments of every cascade survivor plus a random sample
  // of background seeds. A segment is positive when it overlaps one lesion
  // with Dice >= scorer_min_dice.
  FeatureMatrix sx;
  std::vector<int> sy;
  std::vector<std::vector<int>> used;
  for (const auto& st : models.cascade) used.push_back(st.classifier.used_features());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Volume3& v = data[i].volume;
    const Mask3& truth = data[i].truth.mask;
    std::vector<std::size_t> label_size(data[i].truth.boxes.size() + 1, 0);
    for (auto l : truth.data()) ++label_size[l];

    std::vector<Index3> seeds, background;
    for (const Candidate& c : seed_candidates(v, rois[i], opt.config)) {
      const CascadeDecision dec = apply_cascade(models.cascade, [&](std::size_t s) {
        if (models.cascade[s].extractor == "haar") {
          return lesion_haar_features(ivs[i], c.center, models.haar_pool, used[s]);
        }
        return ray_features(v, c.center, opt.config.ray_range).values;
      });
      if (dec.accepted) {
        seeds.push_back(c.center);
      } else if (truth[c.center] == 0) {
        background.push_back(c.center);
      }
    }
    Rng rng(derive_seed(opt.seed, "scorer.neg", i));
    keep_random(background, static_cast<std::size_t>(opt.scorer_background), rng);
    std::sort(background.begin(), background.end());
    seeds.insert(seeds.end(), background.begin(), background.end());

    for (const Index3& seed : seeds) {
      const RoughSegment rs = rough_segment(v, ivs[i], seed, opt.config);
      std::vector<std::size_t> overlap(label_size.size(), 0);
      for (const Index3& p : rs.voxels) ++overlap[truth[p]];
      double best = 0.0;
      for (std::size_t k = 1; k < overlap.size(); ++k) {
        best = std::max(best, 2.0 * overlap[k] / static_cast<double>(rs.volume_voxels + label_size[k]));
      }
      append(sx, sy, rs.features(), best >= opt.scorer_min_dice ? 1 : -1);
    }
  }
  lg.scorer_positives = static_cast<std::size_t>(std::count(sy.begin(), sy.end(), 1));
  lg.scorer_negatives = sy.size() - lg.scorer_positives;
  if (lg.scorer_positives == 0 || lg.scorer_negatives == 0) {
    throw ValidationError("scorer training needs cascade survivors of both classes");
  }
  models.scorer = train_adaboost(sx, sy, opt.scorer_rounds);
  return models;
}

// ---------------------------------------------------------------- CNN data

std::vector<PatchSample> cnn_patches(std::span<const Phantom> data, const CnnTrainOptions& opt) {
  std::vector<PatchSample> out;
  const SegmentConfig& cfg = opt.segment;
  for (std::size_t vi = 0; vi < data.size(); ++vi) {
    const Phantom& ph = data[vi];
    const Dims3& d = ph.volume.dims();
    Rng rng(derive_seed(opt.seed, "cnn.patches", vi));
    for (std::size_t k = 0; k < ph.truth.boxes.size(); ++k) {
      const int label = static_cast<int>(k) + 1;
      const BoxRegion& b = ph.truth.boxes[k];
      const int pad = cfg.slice_padding;
      const int padz = cfg.slice_padding_z;
      const BoxRegion grown =
          clip_box({{b.min.x - pad, b.min.y - pad, b.min.z - padz}, {b.max.x + pad, b.max.y + pad, b.max.z + padz}}, d);
      const BoxRegion roi = segmentation_roi(grown, d);
      const Circle init = circle_from_points(
          {double(grown.min.x - roi.min.x), double(grown.min.y - roi.min.y)},
          {double(grown.max.x - roi.min.x), double(grown.max.y - roi.min.y)});
      const int z0 = std::max(0, grown.min.z - opt.empty_slices);
      const int z1 = std::min(d.nz - 1, grown.max.z + opt.empty_slices);
      for (int z = z0; z <= z1; ++z) {
        const Image2D img = prepare_slice(ph.volume, z, roi, cfg);
        SliceMask gt(img.width, img.height);
        for (int y = 0; y < img.height; ++y) {
          for (int x = 0; x < img.width; ++x) gt(x, y) = ph.truth.mask(roi.min.x + x, roi.min.y + y, z) == label;
        }
        const std::size_t area = gt.count();
        auto add = [&](const Circle& c, int cls) {
          out.push_back({make_patch(img.view(), c, opt.spec.input), cls});
        };
        if (area == 0) {
          for (int i = 0; i < opt.contours_per_slice; ++i) {
            const Circle c{init.cx + uniform(rng, -3, 3), init.cy + uniform(rng, -3, 3),
                           std::max(1.5, init.radius * uniform(rng, 0.3, 1.5))};
            add(c, 3);
          }
          continue;
        }
        double cx = 0, cy = 0;
        for (int y = 0; y < gt.height; ++y) {
          for (int x = 0; x < gt.width; ++x) {
            if (gt(x, y)) {
              cx += x;
              cy += y;
            }
          }
        }
        cx /= static_cast<double>(area);
        cy /= static_cast<double>(area);
        const double r_eq = std::sqrt(static_cast<double>(area) / M_PI);
        add(init, label_patch(init, gt));
        for (int i = 1; i < opt.contours_per_slice; ++i) {
          const double rho = std::exp(uniform(rng, std::log(0.2), std::log(3.0)));
          Circle c{cx, cy, std::max(1.0, rho * r_eq)};
          if (i % 2 == 0) {
            const double a = uniform(rng, 0.0, 2.0 * M_PI), off = uniform(rng, 0.0, 0.4 * r_eq);
            c.cx += off * std::cos(a);
            c.cy += off * std::sin(a);
          }
          add(c, label_patch(c, gt));
        }
      }
    }
  }
  return out;
}

TrainResult train_cnn(std::span<const Phantom> data, const CnnTrainOptions& opt) {
  const std::vector<PatchSample> patches = cnn_patches(data, opt);
  SgdOptions sgd = opt.sgd;
  sgd.seed = derive_seed(opt.seed, "cnn.sgd");
  return sgd_train(ConvNet::init(opt.spec, derive_seed(opt.seed, "cnn.init")), patches, sgd);
}

// ---------------------------------------------------------------- evaluation

namespace {

nlohmann::ordered_json idx_json(const Index3& p) { return nlohmann::ordered_json::array({p.x, p.y, p.z}); }

void segment_into(VolumeEval& ve, const Phantom& ph, const BoxRegion& box, int label,
                  const ModelBundle& bundle) {
  double score = 0.0;
  try {
    const LesionSegmentation seg = segment_lesion(ph.volume, box, *bundle.cnn, bundle.segment);
    for (const auto& w : seg.warnings) ve.warnings.push_back(w);
    if (label > 0) score = dice_label(seg.mask, ph.truth.mask, label);
  } catch (const ValidationError& e) {
    ve.warnings.push_back(std::string("segmentation skipped: ") + e.what());
  }
  if (label > 0) {
    ve.dice.push_back(score);
    ve.dice_labels.push_back(label);
  }
}

}  // namespace

EvalReport run_pipeline(std::span<const Phantom> data, std::span<const std::string> ids,
                        const ModelBundle& bundle, const EvalOptions& opt) {
  if (!bundle.cnn) throw ConfigError("model bundle has no CNN; run `train cnn` first");
  if (ids.size() != data.size()) throw ValidationError("one id per volume required");
  EvalReport rep;
  rep.seed = bundle.seed;
  rep.manual_init = opt.manual_init;
  rep.config = bundle.detector.config;
  rep.segment = bundle.segment;
  if (!opt.manual_init) bundle.detector.validate();

  for (std::size_t i = 0; i < data.size(); ++i) {
    const Phantom& ph = data[i];
    VolumeEval ve;
    ve.id = ids[i];
    if (opt.manual_init) {
      ve.organ_found = true;
      ve.match.volumes = 1;
      for (std::size_t k = 0; k < ph.truth.boxes.size(); ++k) {
        const BoxRegion& b = ph.truth.boxes[k];
        ve.match.lesion_matched.push_back(true);
        ve.match.detection_label.push_back(static_cast<int>(k) + 1);
        ++ve.match.tp;
        segment_into(ve, ph, b, static_cast<int>(k) + 1, bundle);
      }
    } else {
      const DetectionRun run = detect_lesions(ph.volume, bundle.detector, bundle.detector.config);
      ve.counts = run.counts;
      ve.organ_found = run.roi.has_value();
      ve.detections = run.detections;
      std::vector<ScoredPoint> pts;
      for (const auto& c : run.detections) pts.push_back({c.center, c.score});
      ve.match = match_detections(pts, ph.truth.mask);
      for (std::size_t k = 0; k < run.detections.size(); ++k) {
        segment_into(ve, ph, run.detections[k].box, ve.match.detection_label[k], bundle);
      }
    }
    rep.match.merge(ve.match);
    rep.seg.dice.insert(rep.seg.dice.end(), ve.dice.begin(), ve.dice.end());
    rep.volumes.push_back(std::move(ve));
  }
  return rep;
}

EvalReport run_pipeline(const Manifest& m, const ModelBundle& bundle, const EvalOptions& opt) {
  const std::vector<Phantom> data = load_dataset(m);
  std::vector<std::string> ids;
  for (const auto& e : m) ids.push_back(e.volume.stem().string());
  return run_pipeline(data, ids, bundle, opt);
}

nlohmann::ordered_json EvalReport::to_json() const {
  using oj = nlohmann::ordered_json;
  oj det = {{"tp", match.tp},
            {"fn", match.fn},
            {"fp", match.fp},
            {"volumes", match.volumes},
            {"sensitivity", match.sensitivity()},
            {"fp_per_volume", match.fp_per_volume()},
            {"lesion_matched", match.lesion_matched},
            {"matching_rule",
             "greedy by descending score; a detection matches an unmatched lesion when its center "
             "lies in that lesion's mask dilated by one voxel (26-neighborhood)"}};
  oj seg = {{"dice", this->seg.dice},
            {"count", this->seg.dice.size()},
            {"mean", this->seg.mean()},
            {"std", this->seg.stddev()},
            {"protocol", "3D Dice per true-positive lesion against its matched label"}};
  oj vols = oj::array();
  for (const auto& v : volumes) {
    oj dets = oj::array();
    for (std::size_t k = 0; k < v.detections.size(); ++k) {
      const auto& c = v.detections[k];
      dets.push_back({{"center", idx_json(c.center)},
                      {"box_min", idx_json(c.box.min)},
                      {"box_max", idx_json(c.box.max)},
                      {"score", c.score},
                      {"label", v.match.detection_label[k]}});
    }
    vols.push_back({{"id", v.id},
                    {"organ_found", v.organ_found},
                    {"counts",
                     {{"C0", v.counts.c0}, {"C1", v.counts.c1}, {"C2", v.counts.c2}, {"C3", v.counts.c3}, {"D", v.counts.d}}},
                    {"tp", v.match.tp},
                    {"fn", v.match.fn},
                    {"fp", v.match.fp},
                    {"detections", dets},
                    {"dice", v.dice},
                    {"dice_labels", v.dice_labels},
                    {"warnings", v.warnings}});
  }
  return {{"detection", det},
          {"segmentation", seg},
          {"config_echo",
           {{"manual_init", manual_init}, {"detector", lesion::to_json(config)}, {"segment", lesion::to_json(segment)}}},
          {"seed", seed},
          {"volumes", vols}};
}

}  // namespace lesion
