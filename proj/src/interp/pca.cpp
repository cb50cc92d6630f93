#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "carry/interp.hpp"

namespace carry::interp {

namespace {

Eigen::MatrixXd to_matrix(const std::vector<std::vector<double>>& x) {
  const auto n = static_cast<Eigen::Index>(x.size());
  const auto d = n ? static_cast<Eigen::Index>(x.front().size()) : 0;
  Eigen::MatrixXd m(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (static_cast<Eigen::Index>(x[static_cast<std::size_t>(i)].size()) != d)
      throw InterpError("ragged input rows");
    for (Eigen::Index j = 0; j < d; ++j) m(i, j) = x[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  }
  return m;
}

// Flip v so its largest-magnitude entry is positive; returns the applied sign.
double orient(Eigen::Ref<Eigen::VectorXd> v) {
  Eigen::Index arg = 0;
  v.cwiseAbs().maxCoeff(&arg);
  if (v(arg) < 0) {
    v = -v;
    return -1;
  }
  return 1;
}

}  // namespace

PcaFit pca(const std::vector<std::vector<double>>& x, int k) {
  if (k < 1) throw InterpError("pca: k must be positive");
  if (x.size() < static_cast<std::size_t>(k))
    throw InterpError("pca: " + std::to_string(x.size()) + " examples is fewer than k = " +
                      std::to_string(k));
  Eigen::MatrixXd m = to_matrix(x);
  const auto d = m.cols();
  if (k > d) throw InterpError("pca: k exceeds the dimension");
  const Eigen::RowVectorXd mean = m.colwise().mean();
  m.rowwise() -= mean;
  const Eigen::MatrixXd cov = (m.transpose() * m) / static_cast<double>(m.rows());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  if (es.info() != Eigen::Success) throw InterpError("pca: eigen-decomposition failed");
  const Eigen::VectorXd evals = es.eigenvalues().cwiseMax(0.0);
  const double total = evals.sum();

  PcaFit fit;
  fit.mean.assign(mean.data(), mean.data() + d);
  Eigen::MatrixXd comps(d, k);
  for (int c = 0; c < k; ++c) {
    const Eigen::Index col = d - 1 - c;  // eigenvalues ascend
    Eigen::VectorXd v = es.eigenvectors().col(col);
    orient(v);
    comps.col(c) = v;
    fit.components.emplace_back(v.data(), v.data() + d);
    fit.explained.push_back(total > 0 ? evals(col) / total : 0.0);
  }
  const Eigen::MatrixXd proj = m * comps;
  for (Eigen::Index i = 0; i < proj.rows(); ++i) {
    std::vector<double> row(static_cast<std::size_t>(k));
    for (int c = 0; c < k; ++c) row[static_cast<std::size_t>(c)] = proj(i, c);
    fit.projected.push_back(std::move(row));
  }
  return fit;
}

std::vector<std::vector<double>> pca_reconstruct(const PcaFit& fit) {
  std::vector<std::vector<double>> out;
  for (const auto& p : fit.projected) {
    std::vector<double> row = fit.mean;
    for (std::size_t c = 0; c < p.size(); ++c)
      for (std::size_t j = 0; j < row.size(); ++j) row[j] += p[c] * fit.components[c][j];
    out.push_back(std::move(row));
  }
  return out;
}

SvdFit svd(const std::vector<std::vector<double>>& x, int k) {
  const Eigen::MatrixXd m = to_matrix(x);
  if (k < 1 || k > std::min(m.rows(), m.cols())) throw InterpError("svd: invalid rank request");
  Eigen::BDCSVD<Eigen::MatrixXd> s(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
  SvdFit fit;
  for (Eigen::Index c = 0; c < s.singularValues().size(); ++c) fit.singular.push_back(s.singularValues()(c));
  for (int c = 0; c < k; ++c) {
    Eigen::VectorXd v = s.matrixV().col(c);
    const double sign = orient(v);
    Eigen::VectorXd u = s.matrixU().col(c) * (sign * s.singularValues()(c));
    fit.right.emplace_back(v.data(), v.data() + v.size());
    fit.left.emplace_back(u.data(), u.data() + u.size());
  }
  return fit;
}

// ----------------------------------------------------------------- residual

std::string_view block_name(Block b) {
  switch (b) {
    case Block::ResidPre: return "resid_pre";
    case Block::Attention: return "attn";
    case Block::ResidMid: return "resid_mid";
    case Block::Mlp: return "mlp";
    case Block::ResidPost: return "resid_post";
  }
  return "?";
}

Block block_from_name(std::string_view s) {
  for (Block b : {Block::ResidPre, Block::Attention, Block::ResidMid, Block::Mlp, Block::ResidPost})
    if (block_name(b) == s) return b;
  throw InterpError("unknown block '" + std::string(s) +
                    "' (expected resid_pre, attn, resid_mid, mlp or resid_post)");
}

PcaResult residual_pca(const Params& params, const model::ModelConfig& cfg, Examples examples,
                       int layer, Block block, int position, int k,
                       const model::AblationSpec* ablation) {
  if (position < 0 || position >= cfg.seq_len())
    throw InterpError("position " + std::to_string(position) + " outside sequence of length " +
                      std::to_string(cfg.seq_len()));
  if (layer < 0 || layer >= cfg.n_layers) throw InterpError("layer out of range");
  if (examples.size() < static_cast<std::size_t>(k))
    throw InterpError("residual_pca: fewer examples than components");
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto pos = static_cast<std::size_t>(position);
  std::vector<std::vector<double>> rows;
  rows.reserve(examples.size());
  for_each_trace(params, cfg, examples, ablation, 1024,
                 [&](std::size_t, const model::ActivationTrace<float>& tr) {
                   const auto& lt = tr.layers[static_cast<std::size_t>(layer)];
                   const Tensor<float>* t = nullptr;
                   switch (block) {
                     case Block::ResidPre: t = &lt.resid_pre; break;
                     case Block::Attention: t = &lt.attn_out; break;
                     case Block::ResidMid: t = &lt.resid_mid; break;
                     case Block::Mlp: t = &lt.mlp_out; break;
                     case Block::ResidPost: t = &lt.resid_post; break;
                   }
                   for (std::size_t b = 0; b < tr.batch; ++b) {
                     const float* v = t->ptr() + (b * tr.seq + pos) * d;
                     rows.emplace_back(v, v + d);
                   }
                 });
  auto fit = pca(rows, k);
  PcaResult out;
  out.layer = layer;
  out.block = block;
  out.position = position;
  out.mean = std::move(fit.mean);
  out.components = std::move(fit.components);
  out.explained = std::move(fit.explained);
  out.projected = std::move(fit.projected);
  const int digit = position - (2 * cfg.width + 1);
  const bool is_output = digit >= 0 && digit < cfg.width;
  for (const auto& ex : examples) {
    out.task.push_back(ex.task.name());
    out.answer_digit.push_back(is_output ? answer_digit_at(ex, cfg.width, digit) : -1);
    out.naive_sum_digit.push_back(is_output ? naive_sum_digit_at(ex, cfg.width, digit) : -1);
    out.carry_needed.push_back(is_output && carry_at(ex, cfg.width, digit));
  }
  return out;
}

// --------------------------------------------------------------- classifier

int LinearClassifier::predict(std::span<const double> x) const {
  double s = b;
  for (std::size_t j = 0; j < w.size(); ++j) s += w[j] * x[j];
  return s >= 0 ? 1 : -1;
}

double LinearClassifier::accuracy(const std::vector<std::vector<double>>& x,
                                  std::span<const int> y) const {
  if (x.empty()) return 0;
  std::size_t ok = 0;
  for (std::size_t i = 0; i < x.size(); ++i) ok += predict(x[i]) == y[i];
  return static_cast<double>(ok) / static_cast<double>(x.size());
}

LinearClassifier fit_linear_svm(const std::vector<std::vector<double>>& x, std::span<const int> y,
                                std::uint64_t seed, double lambda, int epochs) {
  if (x.empty() || x.size() != y.size()) throw InterpError("fit_linear_svm: bad inputs");
  const std::size_t d = x.front().size();
  // standardise features so the step size is scale free
  std::vector<double> mu(d, 0.0), sd(d, 0.0);
  for (const auto& r : x)
    for (std::size_t j = 0; j < d; ++j) mu[j] += r[j];
  for (auto& m : mu) m /= static_cast<double>(x.size());
  for (const auto& r : x)
    for (std::size_t j = 0; j < d; ++j) sd[j] += (r[j] - mu[j]) * (r[j] - mu[j]);
  for (auto& s : sd) s = std::sqrt(s / static_cast<double>(x.size())) + 1e-12;

  std::vector<double> w(d + 1, 0.0);  // last entry is the bias on a constant feature
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  RngStream rng(seed, "svm");
  std::size_t t = 0;
  std::vector<double> z(d + 1, 1.0);
  for (int e = 0; e < epochs; ++e) {
    rng.shuffle(order.begin(), order.end());
    for (std::size_t i : order) {
      ++t;
      const double eta = 1.0 / (lambda * static_cast<double>(t));
      for (std::size_t j = 0; j < d; ++j) z[j] = (x[i][j] - mu[j]) / sd[j];
      double s = 0;
      for (std::size_t j = 0; j <= d; ++j) s += w[j] * z[j];
      const double scale = 1.0 - eta * lambda;
      for (std::size_t j = 0; j < d; ++j) w[j] *= scale;
      if (y[i] * s < 1)
        for (std::size_t j = 0; j <= d; ++j) w[j] += eta * y[i] * z[j];
    }
  }
  LinearClassifier c;
  c.w.resize(d);
  c.b = w[d];
  for (std::size_t j = 0; j < d; ++j) {
    c.w[j] = w[j] / sd[j];
    c.b -= w[j] * mu[j] / sd[j];
  }
  return c;
}

}  // namespace carry::interp
