#include "lesion/boost.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "lesion/errors.hpp"

namespace lesion {

void FeatureMatrix::append_row(std::span<const double> values) {
  if (rows_ == 0 && cols_ == 0) cols_ = values.size();
  if (values.size() != cols_) throw ValidationError("feature row width mismatch");
  data_.insert(data_.end(), values.begin(), values.end());
  ++rows_;
}

double StrongClassifier::margin(std::span<const double> x) const {
  double sum = 0.0, total = 0.0;
  for (const auto& ws : stumps) {
    sum += ws.alpha * ws.stump.predict(x);
    total += ws.alpha;
  }
  return total > 0.0 ? sum / total : 0.0;
}

int StrongClassifier::max_feature_index() const {
  int m = -1;
  for (const auto& ws : stumps) m = std::max(m, ws.stump.feature);
  return m;
}

std::vector<int> StrongClassifier::used_features() const {
  std::vector<int> f;
  for (const auto& ws : stumps) f.push_back(ws.stump.feature);
  std::sort(f.begin(), f.end());
  f.erase(std::unique(f.begin(), f.end()), f.end());
  return f;
}

double score(const StrongClassifier& c, std::span<const double> x) {
  if (static_cast<long>(x.size()) < c.max_feature_index() + 1) {
    throw ValidationError("feature vector shorter than classifier dimension");
  }
  const double z = c.calibration.a * c.margin(x) + c.calibration.b;
  return 1.0 / (1.0 + std::exp(-z));
}

Calibration fit_calibration(std::span<const double> margins, std::span<const int> y) {
  std::size_t pos = 0, neg = 0;
  for (int label : y) (label > 0 ? pos : neg)++;
  const double hi = (pos + 1.0) / (pos + 2.0), lo = 1.0 / (neg + 2.0);
  std::vector<double> t(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) t[i] = y[i] > 0 ? hi : lo;

  auto nll = [&](double a, double b) {
    double l = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double z = a * margins[i] + b;
      // log(1 + e^z) computed stably
      const double softplus = z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
      l += softplus - t[i] * z;
    }
    return l;
  };

  double a = 0.0, b = std::log((pos + 1.0) / (neg + 1.0));
  double f = nll(a, b);
  for (int it = 0; it < 100; ++it) {
    double ga = 0, gb = 0, haa = 1e-12, hab = 0, hbb = 1e-12;
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double m = margins[i];
      const double p = 1.0 / (1.0 + std::exp(-(a * m + b)));
      const double d = p - t[i];
      const double w = p * (1.0 - p);
      ga += d * m;
      gb += d;
      haa += w * m * m;
      hab += w * m;
      hbb += w;
    }
    if (std::abs(ga) < 1e-10 && std::abs(gb) < 1e-10) break;
    const double det = haa * hbb - hab * hab;
    double da, db;
    if (det > 1e-300) {
      da = -(hbb * ga - hab * gb) / det;
      db = -(-hab * ga + haa * gb) / det;
    } else {
      da = -ga;
      db = -gb;
    }
    double step = 1.0;
    bool improved = false;
    while (step > 1e-10) {
      const double fa = nll(a + step * da, b + step * db);
      if (fa < f - 1e-4 * step * std::abs(ga * da + gb * db) || fa < f) {
        a += step * da;
        b += step * db;
        improved = std::abs(f - fa) > 1e-12 * std::max(1.0, std::abs(f));
        f = fa;
        break;
      }
      step *= 0.5;
    }
    if (!improved) break;
  }
  return {std::max(a, 1e-6), b};
}

StrongClassifier train_adaboost(const FeatureMatrix& x, std::span<const int> y, int rounds,
                                std::vector<RoundStats>* trace) {
  const std::size_t n = x.rows(), nf = x.cols();
  if (n < 2) throw ValidationError("AdaBoost needs at least 2 samples");
  if (y.size() != n) throw ValidationError("label count does not match sample count");
  if (nf == 0) throw ValidationError("AdaBoost needs at least one feature");
  if (rounds < 1) throw ValidationError("AdaBoost rounds must be >= 1");
  std::size_t pos = 0;
  for (int label : y) {
    if (label != 1 && label != -1) throw ValidationError("labels must be -1 or +1");
    if (label > 0) ++pos;
  }
  if (pos == 0 || pos == n) throw ValidationError("AdaBoost needs both classes");

  // Column-major copy plus per-feature sort order, computed once.
  std::vector<double> cols(n * nf);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t f = 0; f < nf; ++f) cols[f * n + i] = x(i, f);
  }
  std::vector<std::uint32_t> order(n * nf);
  for (std::size_t f = 0; f < nf; ++f) {
    auto* o = order.data() + f * n;
    std::iota(o, o + n, 0u);
    const double* c = cols.data() + f * n;
    std::stable_sort(o, o + n, [c](std::uint32_t a, std::uint32_t b) { return c[a] < c[b]; });
  }

  std::vector<double> w(n, 1.0 / static_cast<double>(n));
  std::vector<double> strong(n, 0.0);
  StrongClassifier clf;

  for (int t = 0; t < rounds; ++t) {
    double total_pos = 0.0, total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      total += w[i];
      if (y[i] > 0) total_pos += w[i];
    }
    Stump best;
    double best_err = std::numeric_limits<double>::infinity();
    for (std::size_t f = 0; f < nf; ++f) {
      const std::uint32_t* o = order.data() + f * n;
      const double* c = cols.data() + f * n;
      // Threshold below the minimum: everything predicted +1 for polarity +1.
      double err_plus = total - total_pos;
      auto consider = [&](double threshold, double ep) {
        const double em = total - ep;
        if (ep < best_err) {
          best_err = ep;
          best = {static_cast<int>(f), threshold, 1};
        }
        if (em < best_err) {
          best_err = em;
          best = {static_cast<int>(f), threshold, -1};
        }
      };
      consider(c[o[0]] - 1.0, err_plus);
      for (std::size_t k = 0; k + 1 < n; ++k) {
        const std::uint32_t i = o[k];
        err_plus += y[i] > 0 ? w[i] : -w[i];
        const double v0 = c[i], v1 = c[o[k + 1]];
        if (v1 > v0) consider(0.5 * (v0 + v1), err_plus);
      }
    }

    const double eps_raw = best_err / total;
    if (eps_raw >= 0.5 - 1e-12) break;  // nothing beats chance
    const double eps = std::clamp(eps_raw, 1e-10, 1.0 - 1e-10);
    const double alpha = 0.5 * std::log((1.0 - eps) / eps);
    clf.stumps.push_back({best, alpha});

    double sum = 0.0, loss = 0.0;
    std::size_t wrong = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const int h = (cols[static_cast<std::size_t>(best.feature) * n + i] > best.threshold ? 1 : -1) *
                    best.polarity;
      w[i] *= std::exp(-alpha * y[i] * h);
      sum += w[i];
      strong[i] += alpha * h;
      loss += std::exp(-y[i] * strong[i]);
      if ((strong[i] > 0 ? 1 : -1) != y[i]) ++wrong;
    }
    for (double& wi : w) wi /= sum;
    if (trace) {
      double check = 0.0;
      for (double wi : w) check += wi;
      trace->push_back({best, eps_raw, alpha, loss / n, check, static_cast<double>(wrong) / n});
    }
    if (eps_raw <= 1e-10) break;  // perfect separation; further rounds repeat it
  }

  if (clf.stumps.empty()) {
    // Degenerate data: keep a neutral stump so the classifier is well formed.
    clf.stumps.push_back({Stump{}, 0.0});
    clf.calibration = {1.0, 0.0};
    return clf;
  }
  std::vector<double> margins(n);
  for (std::size_t i = 0; i < n; ++i) margins[i] = clf.margin(x.row(i));
  clf.calibration = fit_calibration(margins, y);
  return clf;
}

// ---------------------------------------------------------------- cascade

CascadeTraining train_cascade(const std::vector<StageSpec>& stages, std::span<const int> labels,
                              const StageFeatureFn& features) {
  if (stages.empty()) throw ConfigError("cascade needs at least one stage");
  CascadeTraining out;
  std::vector<std::size_t> alive(labels.size());
  std::iota(alive.begin(), alive.end(), std::size_t{0});
  if (std::none_of(labels.begin(), labels.end(), [](int l) { return l > 0; })) {
    throw ValidationError("cascade training data contains no positives");
  }

  for (std::size_t s = 0; s < stages.size(); ++s) {
    const StageSpec& spec = stages[s];
    if (!(spec.target_recall > 0.0 && spec.target_recall <= 1.0)) {
      throw ConfigError("stage " + std::to_string(s) + ": target recall must be in (0, 1]");
    }
    std::vector<int> y;
    y.reserve(alive.size());
    for (std::size_t i : alive) y.push_back(labels[i] > 0 ? 1 : -1);
    StageReport rep;
    rep.input_count = alive.size();
    rep.positives = static_cast<std::size_t>(std::count(y.begin(), y.end(), 1));
    rep.negatives = y.size() - rep.positives;
    if (rep.positives == 0) {
      throw ConfigError("stage " + std::to_string(s) + ": recall target unreachable, no positives survive");
    }

    CascadeStage stage;
    stage.extractor = spec.extractor;
    const FeatureMatrix fm = features(s, alive);
    if (fm.rows() != alive.size()) throw ConfigError("feature extractor returned wrong row count");

    if (rep.negatives == 0) {
      stage.classifier.stumps.push_back({Stump{}, 0.0});
      stage.classifier.calibration = {1.0, 0.0};
      stage.reject_threshold = 0.5;
      rep.fallback = true;
      out.warnings.push_back("stage " + std::to_string(s) +
                             ": no negatives; classifier is neutral and threshold defaults to 0.5");
    } else {
      stage.classifier = train_adaboost(fm, y, spec.rounds);
      std::vector<double> pos_scores;
      for (std::size_t r = 0; r < alive.size(); ++r) {
        if (y[r] > 0) pos_scores.push_back(score(stage.classifier, fm.row(r)));
      }
      std::sort(pos_scores.begin(), pos_scores.end());
      const auto drop = static_cast<std::size_t>(
          std::floor((1.0 - spec.target_recall) * static_cast<double>(pos_scores.size()) + 1e-9));
      stage.reject_threshold = pos_scores[std::min(drop, pos_scores.size() - 1)];
    }

    std::vector<std::size_t> next;
    std::size_t kept_pos = 0;
    for (std::size_t r = 0; r < alive.size(); ++r) {
      if (score(stage.classifier, fm.row(r)) >= stage.reject_threshold) {
        next.push_back(alive[r]);
        if (y[r] > 0) ++kept_pos;
      }
    }
    rep.survivors = next.size();
    rep.recall = static_cast<double>(kept_pos) / static_cast<double>(rep.positives);
    out.stages.push_back(std::move(stage));
    out.reports.push_back(rep);
    alive = std::move(next);
  }
  return out;
}

CascadeDecision apply_cascade(std::span<const CascadeStage> stages,
                              const std::function<std::vector<double>(std::size_t)>& features) {
  CascadeDecision d;
  for (std::size_t s = 0; s < stages.size(); ++s) {
    const std::vector<double> x = features(s);
    d.final_score = score(stages[s].classifier, x);
    d.stages_evaluated = s + 1;
    if (d.final_score < stages[s].reject_threshold) {
      d.accepted = false;
      return d;
    }
  }
  return d;
}

}  // namespace lesion
