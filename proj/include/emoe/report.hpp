#pragma once
// Evaluation CSV, ablation tables, SVG plots and the seed-averaged suite runner.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "emoe/trainer.hpp"

namespace emoe {

/// %.9g, or NA for NaN.
inline std::string fmt_num(double v) {
  if (std::isnan(v)) return "NA";
  char b[32];
  std::snprintf(b, sizeof b, "%.9g", v);
  return b;
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

// ---------------------------------------------------------------------------
// Evaluation report: one row per sample, then a summary row.

inline std::string eval_csv(const Predictions& p, const Metrics& m) {
  std::ostringstream o;
  o << "row,sample,depth_true_cm,depth_pred_cm,lifetime_true_ns,lifetime_pred_ns,q_early,q_late,q_global_depth,"
       "q_global_lifetime";
  for (const char* n : kMetricNames) o << ',' << n;
  o << '\n';
  const std::size_t n = p.index.size();
  for (std::size_t i = 0; i < n; ++i) {
    o << i << ',' << p.index[i] << ',' << fmt_num(p.truth[2 * i]) << ',' << fmt_num(p.physical[2 * i]) << ','
      << fmt_num(p.truth[2 * i + 1]) << ',' << fmt_num(p.physical[2 * i + 1]);
    for (std::size_t k = 0; k < 4; ++k) o << ',' << (p.quality.empty() ? "NA" : fmt_num(p.quality[4 * i + k]));
    o << std::string(kMetricNames.size(), ',') << '\n';
  }
  o << "summary,,,,,,,,,";
  for (double v : metric_values(m)) o << ',' << fmt_num(v);
  o << '\n';
  return o.str();
}

// ---------------------------------------------------------------------------
// Ablation tables

struct SuiteResult {
  std::string label;
  std::string ablation;
  std::vector<Metrics> per_seed;
  std::array<double, 6> mean{};
  std::array<double, 6> std{};  // sample std over seeds, 0 for one seed
};

inline void summarize(SuiteResult& r) {
  const std::size_t n = r.per_seed.size();
  for (std::size_t j = 0; j < 6; ++j) {
    double s = 0.0;
    for (const auto& m : r.per_seed) s += metric_values(m)[j];
    const double mean = s / static_cast<double>(n);
    double ss = 0.0;
    for (const auto& m : r.per_seed) ss += std::pow(metric_values(m)[j] - mean, 2);
    r.mean[j] = mean;
    r.std[j] = n > 1 ? std::sqrt(ss / static_cast<double>(n - 1)) : (std::isnan(mean) ? mean : 0.0);
  }
}

inline std::string suite_csv(const std::vector<SuiteResult>& rows) {
  std::ostringstream o;
  o << "Configuration,ablation";
  for (const char* n : kMetricNames) o << ',' << n << ',' << n << " std";
  o << ",seeds\n";
  for (const auto& r : rows) {
    o << '"' << r.label << "\"," << r.ablation;
    for (std::size_t j = 0; j < 6; ++j) o << ',' << fmt_num(r.mean[j]) << ',' << fmt_num(r.std[j]);
    o << ',' << r.per_seed.size() << '\n';
  }
  return o.str();
}

struct SuiteHooks {
  std::function<void(const std::string&)> log;
  std::function<void(const SuiteResult&)> on_row;
};

/// Seeds base.train.seed, +1, ...; every row shares the dataset split.
inline std::vector<SuiteResult> run_suite(const Dataset& data, const RunConfig& base, const std::string& suite,
                                          std::size_t seeds, const SuiteHooks& hooks = {}) {
  if (seeds == 0) throw ConfigError("at least one seed is required");
  const std::vector<SuiteRow> rows = suite_rows(suite);
  const Split split = split_dataset(data.n_samples, base.train);
  std::vector<SuiteResult> out;
  for (const auto& row : rows) {
    SuiteResult res{row.label, row.ablation, {}, {}, {}};
    for (std::size_t s = 0; s < seeds; ++s) {
      RunConfig c = base;
      apply_ablation(c, row.ablation);
      c.train.seed = base.train.seed + s;
      if (hooks.log) hooks.log(row.ablation + " seed " + std::to_string(c.train.seed));
      const TrainResult t = train_model(data, c, split);
      res.per_seed.push_back(evaluate(predict(t.model, data, split.test, c.loss, c.train.eval_batch)));
    }
    summarize(res);
    if (hooks.on_row) hooks.on_row(res);
    out.push_back(std::move(res));
  }
  return out;
}

// ---------------------------------------------------------------------------
// SVG plots

namespace svg {

constexpr double kW = 480, kH = 360, kPad = 48;

inline std::string num(double v) {
  char b[32];
  std::snprintf(b, sizeof b, "%.2f", v);
  return b;
}

struct Frame {
  double x0, x1, y0, y1;
  double px(double x) const { return kPad + (x - x0) / (x1 - x0) * (kW - 2 * kPad); }
  double py(double y) const { return kH - kPad - (y - y0) / (y1 - y0) * (kH - 2 * kPad); }
};

inline std::string open(const std::string& title, const Frame& f, const std::string& xlabel,
                        const std::string& ylabel) {
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\" viewBox=\"0 0 " << kW
    << ' ' << kH << "\" font-family=\"sans-serif\" font-size=\"11\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    << "<text x=\"" << kW / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">" << title << "</text>\n"
    << "<rect x=\"" << kPad << "\" y=\"" << kPad << "\" width=\"" << kW - 2 * kPad << "\" height=\"" << kH - 2 * kPad
    << "\" fill=\"none\" stroke=\"black\"/>\n"
    << "<text x=\"" << kW / 2 << "\" y=\"" << kH - 12 << "\" text-anchor=\"middle\">" << xlabel << "</text>\n"
    << "<text x=\"14\" y=\"" << kH / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 14 " << kH / 2 << ")\">"
    << ylabel << "</text>\n";
  for (int i = 0; i <= 4; ++i) {
    const double x = f.x0 + (f.x1 - f.x0) * i / 4.0, y = f.y0 + (f.y1 - f.y0) * i / 4.0;
    o << "<text x=\"" << num(f.px(x)) << "\" y=\"" << kH - kPad + 14 << "\" text-anchor=\"middle\">" << fmt_num(x)
      << "</text>\n"
      << "<text x=\"" << kPad - 4 << "\" y=\"" << num(f.py(y) + 4) << "\" text-anchor=\"end\">" << fmt_num(y)
      << "</text>\n";
  }
  return o.str();
}

inline std::string scatter(const std::string& title, const std::string& unit, const std::vector<double>& truth,
                           const std::vector<double>& pred) {
  double lo = *std::min_element(truth.begin(), truth.end()), hi = *std::max_element(truth.begin(), truth.end());
  lo = std::min(lo, *std::min_element(pred.begin(), pred.end()));
  hi = std::max(hi, *std::max_element(pred.begin(), pred.end()));
  if (!(hi > lo)) hi = lo + 1.0;
  const Frame f{lo, hi, lo, hi};
  std::ostringstream o;
  o << open(title, f, "true " + unit, "predicted " + unit);
  o << "<line x1=\"" << num(f.px(lo)) << "\" y1=\"" << num(f.py(lo)) << "\" x2=\"" << num(f.px(hi)) << "\" y2=\""
    << num(f.py(hi)) << "\" stroke=\"gray\" stroke-dasharray=\"4 3\"/>\n";
  for (std::size_t i = 0; i < truth.size(); ++i)
    o << "<circle cx=\"" << num(f.px(truth[i])) << "\" cy=\"" << num(f.py(pred[i])) << "\" r=\"2.5\" fill=\"steelblue\"/>\n";
  o << "</svg>\n";
  return o.str();
}

inline std::string histogram(const std::string& title, const std::vector<double>& v, std::size_t bins = 20) {
  std::vector<std::size_t> count(bins, 0);
  for (double x : v) count[std::min(bins - 1, static_cast<std::size_t>(std::clamp(x, 0.0, 1.0) * bins))]++;
  const double top = static_cast<double>(std::max<std::size_t>(1, *std::max_element(count.begin(), count.end())));
  const Frame f{0.0, 1.0, 0.0, top};
  std::ostringstream o;
  o << open(title, f, "quality score", "samples");
  for (std::size_t b = 0; b < bins; ++b) {
    const double x0 = f.px(static_cast<double>(b) / bins), x1 = f.px(static_cast<double>(b + 1) / bins);
    const double y = f.py(static_cast<double>(count[b]));
    o << "<rect x=\"" << num(x0) << "\" y=\"" << num(y) << "\" width=\"" << num(x1 - x0) << "\" height=\""
      << num(f.py(0) - y) << "\" fill=\"darkorange\" stroke=\"white\"/>\n";
  }
  o << "</svg>\n";
  return o.str();
}

/// Curves of mean pooling weight against bin position, one per expert.
inline std::string attention(const std::array<std::vector<double>, 3>& w, const std::array<std::size_t, 3>& offset,
                             std::size_t n_bins) {
  static constexpr const char* kNames[3] = {"early", "late", "global"};
  static constexpr const char* kColors[3] = {"steelblue", "firebrick", "seagreen"};
  double top = 0.0;
  for (const auto& c : w)
    for (double x : c) top = std::max(top, x);
  if (!(top > 0.0)) top = 1.0;
  const Frame f{0.0, static_cast<double>(n_bins), 0.0, top};
  std::ostringstream o;
  o << open("Mean attention weight per expert", f, "time bin", "weight");
  for (std::size_t k = 0; k < 3; ++k) {
    if (w[k].empty()) continue;
    o << "<polyline fill=\"none\" stroke=\"" << kColors[k] << "\" points=\"";
    for (std::size_t j = 0; j < w[k].size(); ++j)
      o << (j ? " " : "") << num(f.px(static_cast<double>(offset[k] + j))) << ',' << num(f.py(w[k][j]));
    o << "\"/>\n<text x=\"" << kW - kPad - 4 << "\" y=\"" << kPad + 14 + 14 * k << "\" text-anchor=\"end\" fill=\""
      << kColors[k] << "\">" << kNames[k] << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

}  // namespace svg

/// Writes up to five SVG files; returns the names written.
inline std::vector<std::string> write_plots(const fs::path& dir, const Predictions& p, const ModelConfig& cfg) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  std::vector<std::string> written;
  auto emit = [&](const std::string& name, const std::string& text) {
    write_text(dir / name, text);
    written.push_back(name);
  };
  const std::size_t n = p.index.size();
  auto column = [&](const std::vector<double>& v, std::size_t stride, std::size_t c) {
    std::vector<double> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(v[stride * i + c]);
    return out;
  };
  emit("depth_scatter.svg", svg::scatter("Depth: predicted vs true", "depth (cm)", column(p.truth, 2, 0),
                                         column(p.physical, 2, 0)));
  emit("lifetime_scatter.svg", svg::scatter("Lifetime: predicted vs true", "lifetime (ns)", column(p.truth, 2, 1),
                                            column(p.physical, 2, 1)));
  if (!p.quality.empty()) {
    emit("quality_depth.svg", svg::histogram("Global quality score: depth", column(p.quality, 4, 2)));
    emit("quality_lifetime.svg", svg::histogram("Global quality score: lifetime", column(p.quality, 4, 3)));
  }
  if (std::any_of(p.attention.begin(), p.attention.end(), [](const auto& a) { return !a.empty(); })) {
    std::array<std::size_t, 3> offset{0, 0, 0};
    if (!cfg.ablations.heteroscedastic) offset[1] = cfg.split_bin();
    emit("attention.svg", svg::attention(p.attention, offset, cfg.n_bins));
  }
  return written;
}

}  // namespace emoe
