#pragma once

// Synthetic mixture-of-Gaussians environment with an exact conditional
// oracle, dataset containers and CSV I/O, and daily stock-panel ingestion with
// rolling windows.

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cstdio>
#include <cmath>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"

#include "crokit/error.hpp"
#include "crokit/nn.hpp"
#include "crokit/uncertainty.hpp"

namespace crokit {

// ---------------------------------------------------------------------------
// Multivariate Gaussians

namespace detail {

inline Vec standard_normal(Index n, std::mt19937_64& rng) {
  std::normal_distribution<double> z(0.0, 1.0);
  Vec v(n);
  for (Index i = 0; i < n; ++i) v(i) = z(rng);
  return v;
}

inline Mat cholesky_or_throw(const Mat& S, const std::string& what) {
  Eigen::LLT<Mat> llt(S);
  if (llt.info() != Eigen::Success) throw InputError(what + ": covariance is not positive definite");
  return llt.matrixL();
}

inline double gaussian_logpdf(const Vec& x, const Vec& mean, const Mat& chol) {
  const Vec z = chol.triangularView<Eigen::Lower>().solve(x - mean);
  const double logdet = 2.0 * chol.diagonal().array().log().sum();
  return -0.5 * (z.squaredNorm() + logdet + static_cast<double>(x.size()) * std::log(2.0 * M_PI));
}

/// Shortest decimal text that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s, std::size_t line, const std::string& file) {
  double v = 0.0;
  while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\r')) s.remove_suffix(1);
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw InputError(file + ":" + std::to_string(line) + ": cannot parse number '" + std::string(s) + "'");
  }
  return v;
}

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace detail

/// Finite mixture of Gaussians, used for the conditional law of xi given psi.
class GaussianMixture {
 public:
  GaussianMixture() = default;
  GaussianMixture(Vec weights, std::vector<Vec> means, std::vector<Mat> covs)
      : weights_(std::move(weights)), means_(std::move(means)), covs_(std::move(covs)) {
    detail::require(weights_.size() == static_cast<Index>(means_.size()) && means_.size() == covs_.size() &&
                        !means_.empty(),
                    "mixture: component count mismatch");
    for (const auto& c : covs_) chols_.push_back(detail::cholesky_or_throw(c, "mixture"));
    cumulative_.resize(weights_.size());
    std::partial_sum(weights_.begin(), weights_.end(), cumulative_.begin());
  }

  std::size_t components() const { return means_.size(); }
  const Vec& weights() const { return weights_; }
  const std::vector<Vec>& means() const { return means_; }
  const std::vector<Mat>& covariances() const { return covs_; }

  Vec mean() const {
    Vec m = Vec::Zero(means_.front().size());
    for (std::size_t k = 0; k < means_.size(); ++k) m += weights_(static_cast<Index>(k)) * means_[k];
    return m;
  }

  Mat covariance() const {
    const Vec m = mean();
    Mat S = Mat::Zero(m.size(), m.size());
    for (std::size_t k = 0; k < means_.size(); ++k) {
      const Vec d = means_[k] - m;
      S += weights_(static_cast<Index>(k)) * (covs_[k] + d * d.transpose());
    }
    return S;
  }

  Vec sample(std::mt19937_64& rng) const {
    std::uniform_real_distribution<double> u(0.0, cumulative_.back());
    const double t = u(rng);
    std::size_t k = 0;
    while (k + 1 < cumulative_.size() && t >= cumulative_[k]) ++k;
    return means_[k] + chols_[k] * detail::standard_normal(means_[k].size(), rng);
  }

 private:
  Vec weights_;
  std::vector<Vec> means_;
  std::vector<Mat> covs_;
  std::vector<Mat> chols_;
  std::vector<double> cumulative_;
};

// ---------------------------------------------------------------------------
// Synthetic environment

struct MixtureComponent {
  double weight = 1.0;
  Vec mean;  // joint (psi, xi)
  Mat cov;
};

/// Joint mixture over (psi, xi) with psi first.
class MixtureEnv {
 public:
  MixtureEnv() = default;
  MixtureEnv(Index covariates, Index dim, std::vector<MixtureComponent> comps)
      : dc_(covariates), m_(dim), comps_(std::move(comps)) {
    validate();
  }

  Index covariates() const { return dc_; }
  Index dim() const { return m_; }
  const std::vector<MixtureComponent>& components() const { return comps_; }

  /// Copy with every component mean jittered by N(0, sd^2).
  MixtureEnv perturbed(std::uint64_t seed, double sd = 0.1) const {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, sd);
    auto comps = comps_;
    for (auto& c : comps) {
      for (Index i = 0; i < c.mean.size(); ++i) c.mean(i) += n(rng);
    }
    return MixtureEnv(dc_, m_, std::move(comps));
  }

  nlohmann::json to_json() const {
    nlohmann::json cs = nlohmann::json::array();
    for (const auto& c : comps_) {
      std::vector<std::vector<double>> cov(c.cov.rows(), std::vector<double>(c.cov.cols()));
      for (Index i = 0; i < c.cov.rows(); ++i) {
        for (Index j = 0; j < c.cov.cols(); ++j) cov[i][j] = c.cov(i, j);
      }
      cs.push_back({{"weight", c.weight},
                    {"mean", std::vector<double>(c.mean.data(), c.mean.data() + c.mean.size())},
                    {"cov", cov}});
    }
    return {{"covariates", dc_}, {"dim", m_}, {"components", cs}};
  }

  static MixtureEnv from_json(const nlohmann::json& j) {
    try {
      const Index dc = j.at("covariates").get<Index>();
      const Index m = j.at("dim").get<Index>();
      std::vector<MixtureComponent> comps;
      for (const auto& c : j.at("components")) {
        MixtureComponent mc;
        mc.weight = c.at("weight").get<double>();
        const auto mean = c.at("mean").get<std::vector<double>>();
        mc.mean = Eigen::Map<const Vec>(mean.data(), static_cast<Index>(mean.size()));
        const auto cov = c.at("cov").get<std::vector<std::vector<double>>>();
        mc.cov.resize(static_cast<Index>(cov.size()), static_cast<Index>(cov.size()));
        for (std::size_t i = 0; i < cov.size(); ++i) {
          detail::require(cov[i].size() == cov.size(), "env json: covariance must be square");
          for (std::size_t k = 0; k < cov.size(); ++k) mc.cov(static_cast<Index>(i), static_cast<Index>(k)) = cov[i][k];
        }
        comps.push_back(std::move(mc));
      }
      return MixtureEnv(dc, m, std::move(comps));
    } catch (const nlohmann::json::exception& e) {
      throw InputError(std::string("env json: ") + e.what());
    }
  }

 private:
  void validate() const {
    detail::require(dc_ >= 1 && m_ >= 1 && !comps_.empty(), "env: need covariates, a response and a component");
    double total = 0.0;
    for (const auto& c : comps_) {
      detail::require(c.weight >= 0, "env: component weights must be nonnegative");
      detail::require(c.mean.size() == dc_ + m_ && c.cov.rows() == dc_ + m_ && c.cov.cols() == dc_ + m_,
                      "env: component dimensions must equal covariates + dim");
      detail::require((c.cov - c.cov.transpose()).cwiseAbs().maxCoeff() <= 1e-12, "env: covariance not symmetric");
      detail::cholesky_or_throw(c.cov, "env");
      total += c.weight;
    }
    detail::require(std::abs(total - 1.0) <= 1e-9, "env: component weights must sum to 1");
  }

  Index dc_ = 0;
  Index m_ = 0;
  std::vector<MixtureComponent> comps_;
};

/// Builds a joint covariance diag(sd) C diag(sd).
inline Mat covariance_from(const std::vector<double>& sd, const std::vector<std::vector<double>>& corr) {
  const Index n = static_cast<Index>(sd.size());
  Mat S(n, n);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) S(i, j) = corr[i][j] * sd[i] * sd[j];
  }
  return S;
}

/// Default 3-component environment over 2 covariates and 2 assets. The first
/// two components share their covariate law, so for psi in their region the
/// first asset's return is bimodal (a low-return and a rally regime).
inline MixtureEnv default_env() {
  std::vector<MixtureComponent> c(3);
  c[0].weight = 0.3;
  c[0].mean = (Vec(4) << 1.0, 0.0, 0.6, 0.3).finished();
  c[0].cov = covariance_from({0.8, 0.8, 0.6, 0.75},
                             {{1, .2, .4, -.3}, {.2, 1, -.3, .4}, {.4, -.3, 1, .2}, {-.3, .4, .2, 1}});
  c[1].weight = 0.3;
  c[1].mean = (Vec(4) << 1.0, 0.0, 3.0, 0.3).finished();
  c[1].cov = covariance_from({0.8, 0.8, 0.9, 0.75},
                             {{1, -.3, .5, .3}, {-.3, 1, .3, -.4}, {.5, .3, 1, .1}, {.3, -.4, .1, 1}});
  c[2].weight = 0.4;
  c[2].mean = (Vec(4) << -1.2, 0.5, 0.3, 1.8).finished();
  c[2].cov = covariance_from({0.8, 0.8, 0.6, 1.2},
                             {{1, .2, .35, .6}, {.2, 1, -.3, .4}, {.35, -.3, 1, .2}, {.6, .4, .2, 1}});
  return MixtureEnv(2, 2, std::move(c));
}

/// Law of xi given psi: per-component Gaussian conditionals
///   mean = mu_xi + S_xp S_pp^{-1} (psi - mu_psi),  cov = S_xx - S_xp S_pp^{-1} S_px,
/// reweighted by each component's density at psi.
inline GaussianMixture conditional_oracle(const MixtureEnv& env, const Vec& psi) {
  const Index dc = env.covariates();
  const Index m = env.dim();
  detail::require(psi.size() == dc, "conditional_oracle: covariate dimension mismatch");
  const std::size_t K = env.components().size();
  Vec logw(static_cast<Index>(K));
  std::vector<Vec> means;
  std::vector<Mat> covs;
  for (std::size_t k = 0; k < K; ++k) {
    const auto& c = env.components()[k];
    const Mat Spp = c.cov.topLeftCorner(dc, dc);
    const Mat Sxp = c.cov.bottomLeftCorner(m, dc);
    const Mat Sxx = c.cov.bottomRightCorner(m, m);
    const Eigen::LLT<Mat> llt(Spp);
    const Mat A = llt.solve(Sxp.transpose()).transpose();  // S_xp S_pp^{-1}
    means.push_back(c.mean.tail(m) + A * (psi - c.mean.head(dc)));
    Mat S = Sxx - A * Sxp.transpose();
    covs.push_back(0.5 * (S + S.transpose()));
    logw(static_cast<Index>(k)) = std::log(c.weight) + detail::gaussian_logpdf(psi, c.mean.head(dc), llt.matrixL());
  }
  Vec w = (logw.array() - logw.maxCoeff()).exp();
  w /= w.sum();
  return GaussianMixture(std::move(w), std::move(means), std::move(covs));
}

/// Monte Carlo estimate of P(xi in set | psi).
inline double conditional_coverage_prob(const MixtureEnv& env, const Vec& psi, const Ellipsoid& set, int n_mc,
                                        std::uint64_t seed) {
  detail::require(n_mc >= 1, "conditional_coverage_prob: n_mc must be positive");
  detail::require(set.dim() == env.dim(), "conditional_coverage_prob: set dimension mismatch");
  const GaussianMixture law = conditional_oracle(env, psi);
  std::mt19937_64 rng(seed);
  int hits = 0;
  for (int i = 0; i < n_mc; ++i) hits += contains(set, law.sample(rng)) ? 1 : 0;
  return static_cast<double>(hits) / n_mc;
}

// ---------------------------------------------------------------------------
// Datasets

enum class Split { train, validation, test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::validation: return "validation";
    case Split::test: return "test";
  }
  return "train";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "validation" || s == "val") return Split::validation;
  if (s == "test") return Split::test;
  throw InputError("unknown split '" + s + "'");
}

struct Dataset {
  Mat psi;  // n x covariates
  Mat xi;   // n x dim
  std::vector<Split> split;
  std::vector<std::string> dates;  // optional, one per row
  std::string provenance;

  Index size() const { return psi.rows(); }
  Index covariates() const { return psi.cols(); }
  Index dim() const { return xi.cols(); }

  std::vector<Index> rows(Split s) const {
    std::vector<Index> out;
    for (Index i = 0; i < size(); ++i) {
      if (split[static_cast<std::size_t>(i)] == s) out.push_back(i);
    }
    return out;
  }

  Dataset subset(const std::vector<Index>& idx) const {
    Dataset d;
    d.psi.resize(static_cast<Index>(idx.size()), covariates());
    d.xi.resize(static_cast<Index>(idx.size()), dim());
    for (std::size_t k = 0; k < idx.size(); ++k) {
      d.psi.row(static_cast<Index>(k)) = psi.row(idx[k]);
      d.xi.row(static_cast<Index>(k)) = xi.row(idx[k]);
      d.split.push_back(split[static_cast<std::size_t>(idx[k])]);
      if (!dates.empty()) d.dates.push_back(dates[static_cast<std::size_t>(idx[k])]);
    }
    d.provenance = provenance;
    return d;
  }

  Dataset part(Split s) const { return subset(rows(s)); }

  void validate() const {
    detail::require(psi.rows() == xi.rows() && static_cast<Index>(split.size()) == psi.rows(),
                    "dataset: row counts disagree");
    detail::require(dates.empty() || static_cast<Index>(dates.size()) == psi.rows(), "dataset: date count mismatch");
  }
};

/// Split sizes proportional to `fractions` (train, validation), rounded down,
/// with the remainder assigned to test.
inline std::vector<Split> assign_splits(Index n, double train_frac = 0.3, double val_frac = 0.2) {
  const Index n_train = static_cast<Index>(std::floor(train_frac * static_cast<double>(n) + 1e-9));
  const Index n_val = static_cast<Index>(std::floor(val_frac * static_cast<double>(n) + 1e-9));
  std::vector<Split> s(static_cast<std::size_t>(n), Split::test);
  for (Index i = 0; i < n; ++i) {
    if (i < n_train) {
      s[static_cast<std::size_t>(i)] = Split::train;
    } else if (i < n_train + n_val) {
      s[static_cast<std::size_t>(i)] = Split::validation;
    }
  }
  return s;
}

/// i.i.d. draws: component by weight, then the joint Gaussian. Rows are tagged
/// train / validation / test in 30/20/50 proportion.
inline Dataset sample_env(const MixtureEnv& env, Index n, std::uint64_t seed) {
  detail::require(n >= 1, "sample_env: n must be positive");
  std::vector<Vec> means;
  std::vector<Mat> covs;
  Vec w(static_cast<Index>(env.components().size()));
  for (std::size_t k = 0; k < env.components().size(); ++k) {
    means.push_back(env.components()[k].mean);
    covs.push_back(env.components()[k].cov);
    w(static_cast<Index>(k)) = env.components()[k].weight;
  }
  const GaussianMixture joint(w, means, covs);
  std::mt19937_64 rng(seed);
  Dataset d;
  d.psi.resize(n, env.covariates());
  d.xi.resize(n, env.dim());
  for (Index i = 0; i < n; ++i) {
    const Vec z = joint.sample(rng);
    d.psi.row(i) = z.head(env.covariates()).transpose();
    d.xi.row(i) = z.tail(env.dim()).transpose();
  }
  d.split = assign_splits(n);
  d.provenance = "mixture-env seed=" + std::to_string(seed);
  return d;
}

/// CSV snapshot: optional "# <json>" first line, then a header
/// `split[,date],psi0..,xi0..` and one row per sample.
inline void write_dataset_csv(std::ostream& os, const Dataset& d, const nlohmann::json& meta = nullptr) {
  d.validate();
  if (!meta.is_null()) os << "# " << meta.dump() << '\n';
  os << "split";
  if (!d.dates.empty()) os << ",date";
  for (Index j = 0; j < d.covariates(); ++j) os << ",psi" << j;
  for (Index j = 0; j < d.dim(); ++j) os << ",xi" << j;
  os << '\n';
  for (Index i = 0; i < d.size(); ++i) {
    os << split_name(d.split[static_cast<std::size_t>(i)]);
    if (!d.dates.empty()) os << ',' << d.dates[static_cast<std::size_t>(i)];
    for (Index j = 0; j < d.covariates(); ++j) os << ',' << detail::format_double(d.psi(i, j));
    for (Index j = 0; j < d.dim(); ++j) os << ',' << detail::format_double(d.xi(i, j));
    os << '\n';
  }
}

inline Dataset read_dataset_csv(std::istream& is, const std::string& name = "dataset") {
  std::string line;
  std::size_t lineno = 0;
  std::vector<std::string> header;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    header = detail::split_csv(line);
    break;
  }
  detail::require(!header.empty() && header[0] == "split", name + ": missing header with leading 'split' column");
  const bool has_date = header.size() > 1 && header[1] == "date";
  Index dc = 0, m = 0;
  for (std::size_t k = has_date ? 2 : 1; k < header.size(); ++k) {
    if (header[k].rfind("psi", 0) == 0) {
      ++dc;
    } else if (header[k].rfind("xi", 0) == 0) {
      ++m;
    } else {
      throw InputError(name + ": unexpected column '" + header[k] + "'");
    }
  }
  detail::require(m >= 1, name + ": no xi columns");
  std::vector<std::vector<double>> rows;
  Dataset d;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    const auto cells = detail::split_csv(line);
    if (cells.size() != header.size()) {
      throw InputError(name + ":" + std::to_string(lineno) + ": expected " + std::to_string(header.size()) + " cells");
    }
    try {
      d.split.push_back(parse_split(cells[0]));
    } catch (const InputError&) {
      throw InputError(name + ":" + std::to_string(lineno) + ": unknown split '" + cells[0] + "'");
    }
    std::size_t k = 1;
    if (has_date) d.dates.push_back(cells[k++]);
    std::vector<double> vals;
    for (; k < cells.size(); ++k) vals.push_back(detail::parse_double(cells[k], lineno, name));
    rows.push_back(std::move(vals));
  }
  d.psi.resize(static_cast<Index>(rows.size()), dc);
  d.xi.resize(static_cast<Index>(rows.size()), m);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (Index j = 0; j < dc; ++j) d.psi(static_cast<Index>(i), j) = rows[i][static_cast<std::size_t>(j)];
    for (Index j = 0; j < m; ++j) d.xi(static_cast<Index>(i), j) = rows[i][static_cast<std::size_t>(dc + j)];
  }
  d.provenance = name;
  return d;
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw InputError("cannot open dataset '" + path + "'");
  return read_dataset_csv(is, path);
}

// ---------------------------------------------------------------------------
// Stock panel

struct StockPanel {
  std::vector<std::string> dates;
  std::vector<std::string> assets;
  std::vector<std::string> indices;
  Mat close;   // T x assets
  Mat volume;  // T x assets
  Mat index;   // T x indices

  Index periods() const { return static_cast<Index>(dates.size()); }

  StockPanel select_assets(const std::vector<std::size_t>& which) const {
    StockPanel p;
    p.dates = dates;
    p.indices = indices;
    p.index = index;
    p.close.resize(periods(), static_cast<Index>(which.size()));
    p.volume.resize(periods(), static_cast<Index>(which.size()));
    for (std::size_t k = 0; k < which.size(); ++k) {
      p.assets.push_back(assets.at(which[k]));
      p.close.col(static_cast<Index>(k)) = close.col(static_cast<Index>(which[k]));
      p.volume.col(static_cast<Index>(k)) = volume.col(static_cast<Index>(which[k]));
    }
    return p;
  }
};

/// Header: `date,<A>_close,<A>_volume,...,<I>_index,...`. Blank cells are
/// forward-filled; leading rows with gaps are dropped.
inline StockPanel read_stock_panel(std::istream& is, const std::string& name = "stocks") {
  std::string line;
  std::size_t lineno = 0;
  std::vector<std::string> header;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    header = detail::split_csv(line);
    break;
  }
  detail::require(!header.empty() && header[0] == "date", name + ": header must start with 'date'");
  StockPanel p;
  struct Col {
    int kind;  // 0 close, 1 volume, 2 index
    std::size_t slot;
  };
  std::vector<Col> cols;
  auto ends_with = [](const std::string& s, const std::string& suf) {
    return s.size() > suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
  };
  for (std::size_t k = 1; k < header.size(); ++k) {
    const std::string& h = header[k];
    if (ends_with(h, "_close")) {
      p.assets.push_back(h.substr(0, h.size() - 6));
      cols.push_back({0, p.assets.size() - 1});
    } else if (ends_with(h, "_volume")) {
      const std::string a = h.substr(0, h.size() - 7);
      detail::require(!p.assets.empty() && p.assets.back() == a,
                      name + ": volume column '" + h + "' must follow its close column");
      cols.push_back({1, p.assets.size() - 1});
    } else if (ends_with(h, "_index")) {
      p.indices.push_back(h.substr(0, h.size() - 6));
      cols.push_back({2, p.indices.size() - 1});
    } else {
      throw InputError(name + ": unrecognized column '" + h + "'");
    }
  }
  detail::require(!p.assets.empty(), name + ": no asset columns");
  const std::size_t A = p.assets.size(), I = p.indices.size();
  std::vector<std::vector<double>> closes, vols, idx;
  std::vector<double> last_close(A, NAN), last_vol(A, NAN), last_idx(I, NAN);
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    const auto cells = detail::split_csv(line);
    if (cells.size() != header.size()) {
      throw InputError(name + ":" + std::to_string(lineno) + ": expected " + std::to_string(header.size()) + " cells");
    }
    if (!p.dates.empty() && !(cells[0] > p.dates.back())) {
      throw InputError(name + ":" + std::to_string(lineno) + ": dates must be strictly increasing");
    }
    for (std::size_t k = 1; k < cells.size(); ++k) {
      std::string_view cell = cells[k];
      if (cell.find_first_not_of(' ') == std::string_view::npos) continue;  // gap: keep previous value
      const double v = detail::parse_double(cell, lineno, name);
      const Col c = cols[k - 1];
      (c.kind == 0 ? last_close : c.kind == 1 ? last_vol : last_idx)[c.slot] = v;
    }
    p.dates.push_back(cells[0]);
    closes.push_back(last_close);
    vols.push_back(last_vol);
    idx.push_back(last_idx);
  }
  // Drop leading rows that still have gaps after forward-filling.
  std::size_t first = 0;
  auto complete = [](const std::vector<double>& v) { return std::none_of(v.begin(), v.end(), [](double x) { return std::isnan(x); }); };
  while (first < p.dates.size() && !(complete(closes[first]) && complete(vols[first]) && complete(idx[first]))) ++first;
  p.dates.erase(p.dates.begin(), p.dates.begin() + static_cast<std::ptrdiff_t>(first));
  const Index T = p.periods();
  if (T < 2) throw InputError(name + ": need at least 2 dates with complete data");
  p.close.resize(T, static_cast<Index>(A));
  p.volume.resize(T, static_cast<Index>(A));
  p.index.resize(T, static_cast<Index>(I));
  for (Index t = 0; t < T; ++t) {
    const std::size_t s = first + static_cast<std::size_t>(t);
    for (std::size_t a = 0; a < A; ++a) {
      p.close(t, static_cast<Index>(a)) = closes[s][a];
      p.volume(t, static_cast<Index>(a)) = vols[s][a];
    }
    for (std::size_t i = 0; i < I; ++i) p.index(t, static_cast<Index>(i)) = idx[s][i];
  }
  return p;
}

inline StockPanel load_stock_panel(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw InputError("cannot open stock CSV '" + path + "'");
  return read_stock_panel(is, path);
}

inline void write_stock_panel(std::ostream& os, const StockPanel& p) {
  os << "date";
  for (const auto& a : p.assets) os << ',' << a << "_close," << a << "_volume";
  for (const auto& i : p.indices) os << ',' << i << "_index";
  os << '\n';
  for (Index t = 0; t < p.periods(); ++t) {
    os << p.dates[static_cast<std::size_t>(t)];
    for (Index a = 0; a < static_cast<Index>(p.assets.size()); ++a) {
      os << ',' << detail::format_double(p.close(t, a)) << ',' << detail::format_double(p.volume(t, a));
    }
    for (Index i = 0; i < static_cast<Index>(p.indices.size()); ++i) os << ',' << detail::format_double(p.index(t, i));
    os << '\n';
  }
}

/// Weekday-dated synthetic panel: one market factor drives the index and the
/// assets, each asset has its own beta, drift and mild momentum. Used for
/// backtest smoke runs and round-trip tests.
inline StockPanel synthetic_stock_panel(Index assets, Index indices, Index periods, std::uint64_t seed) {
  detail::require(assets >= 1 && indices >= 0 && periods >= 2, "synthetic_stock_panel: invalid sizes");
  using namespace std::chrono;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  StockPanel p;
  for (Index a = 0; a < assets; ++a) p.assets.push_back("S" + std::to_string(a));
  for (Index i = 0; i < indices; ++i) p.indices.push_back("I" + std::to_string(i));
  p.close.resize(periods, assets);
  p.volume.resize(periods, assets);
  p.index.resize(periods, indices);
  Vec beta(assets), drift(assets), last = Vec::Zero(assets);
  for (Index a = 0; a < assets; ++a) {
    beta(a) = 0.5 + u(rng);
    drift(a) = 2e-4 * (u(rng) - 0.3);
  }
  sys_days day = year{2015} / January / 2;
  for (Index t = 0; t < periods; ++t) {
    while (weekday(day) == Saturday || weekday(day) == Sunday) day += days{1};
    const year_month_day ymd(day);
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(ymd.year()), static_cast<unsigned>(ymd.month()),
                  static_cast<unsigned>(ymd.day()));
    p.dates.emplace_back(buf);
    day += days{1};
    const double market = 3e-4 + 0.01 * z(rng);
    for (Index i = 0; i < indices; ++i) {
      const double r = market + 0.003 * z(rng);
      p.index(t, i) = t == 0 ? 1000.0 : p.index(t - 1, i) * (1.0 + r);
    }
    for (Index a = 0; a < assets; ++a) {
      const double r = drift(a) + beta(a) * market + 0.1 * last(a) + 0.012 * z(rng);
      p.close(t, a) = t == 0 ? 50.0 + 50.0 * u(rng) : p.close(t - 1, a) * (1.0 + r);
      p.volume(t, a) = std::round(1e6 * std::exp(0.3 * z(rng) + 20.0 * std::abs(r)));
      last(a) = t == 0 ? 0.0 : r;
    }
  }
  return p;
}

struct ReturnsOptions {
  /// Trailing window for the log-volume z-score.
  Index volume_window = 20;
};

/// Percentage returns as xi_t and covariates measurable at t-1:
/// psi_t = [asset returns at t-1, log-volume z-scores at t-1, index returns at t-1].
inline Dataset make_returns(const StockPanel& p, const ReturnsOptions& opt = {}) {
  const Index T = p.periods();
  const Index A = static_cast<Index>(p.assets.size());
  const Index I = static_cast<Index>(p.indices.size());
  if (T < 2) throw InputError("make_returns: need at least 2 dates");
  auto pct = [](double now, double prev) { return (now - prev) / prev; };
  Mat ret = Mat::Zero(T, A), iret = Mat::Zero(T, I), vz = Mat::Zero(T, A);
  for (Index t = 1; t < T; ++t) {
    for (Index a = 0; a < A; ++a) ret(t, a) = pct(p.close(t, a), p.close(t - 1, a));
    for (Index i = 0; i < I; ++i) iret(t, i) = pct(p.index(t, i), p.index(t - 1, i));
  }
  for (Index t = 0; t < T; ++t) {
    const Index lo = std::max<Index>(0, t - opt.volume_window + 1);
    const Index cnt = t - lo + 1;
    for (Index a = 0; a < A; ++a) {
      if (cnt < 2) continue;
      const Vec lv = p.volume.col(a).segment(lo, cnt).array().max(1e-300).log();
      const double mean = lv.mean();
      const double sd = std::sqrt((lv.array() - mean).square().sum() / static_cast<double>(cnt - 1));
      vz(t, a) = sd > 0 ? (lv(cnt - 1) - mean) / sd : 0.0;
    }
  }
  Dataset d;
  if (T < 3) {
    // Only one return exists; there is no lagged covariate row to build.
    d.psi.resize(0, 2 * A + I);
    d.xi.resize(0, A);
    return d;
  }
  const Index n = T - 2;
  d.psi.resize(n, 2 * A + I);
  d.xi.resize(n, A);
  for (Index k = 0; k < n; ++k) {
    const Index t = k + 2;
    d.xi.row(k) = ret.row(t);
    d.psi.row(k) << ret.row(t - 1), vz.row(t - 1), iret.row(t - 1);
    d.dates.push_back(p.dates[static_cast<std::size_t>(t)]);
  }
  d.split.assign(static_cast<std::size_t>(n), Split::train);
  d.provenance = "stock panel";
  return d;
}

struct WindowSpec {
  Index train = 0;
  Index validation = 0;
  Index test = 0;
  Index stride = 0;
};

/// Chronological train/validation/test windows advancing by `stride`.
inline std::vector<Dataset> rolling_windows(const Dataset& d, const WindowSpec& w) {
  detail::require(w.train > 0 && w.validation > 0 && w.test > 0 && w.stride > 0,
                  "rolling_windows: lengths and stride must be positive");
  const Index span = w.train + w.validation + w.test;
  if (d.size() < span) {
    throw InputError("rolling_windows: insufficient data, need " + std::to_string(span) + " rows, have " +
                     std::to_string(d.size()));
  }
  std::vector<Dataset> out;
  for (Index start = 0; start + span <= d.size(); start += w.stride) {
    std::vector<Index> idx(static_cast<std::size_t>(span));
    std::iota(idx.begin(), idx.end(), start);
    Dataset win = d.subset(idx);
    for (Index k = 0; k < span; ++k) {
      win.split[static_cast<std::size_t>(k)] = k < w.train                ? Split::train
                                               : k < w.train + w.validation ? Split::validation
                                                                            : Split::test;
    }
    win.provenance = d.provenance + " window@" + std::to_string(start);
    out.push_back(std::move(win));
  }
  return out;
}

/// Random subset of `count` assets (sorted by column order).
inline std::vector<std::size_t> pick_assets(std::size_t available, std::size_t count, std::uint64_t seed) {
  detail::require(count >= 1 && count <= available, "pick_assets: cannot choose " + std::to_string(count) +
                                                         " of " + std::to_string(available) + " assets");
  std::vector<std::size_t> all(available);
  std::iota(all.begin(), all.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(all.begin(), all.end(), rng);
  all.resize(count);
  std::sort(all.begin(), all.end());
  return all;
}

}  // namespace crokit
