#include "tmlab/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "tmlab/errors.hpp"
#include "tmlab/rng.hpp"

namespace tmlab::model {

std::string_view to_string(Domain domain) {
  return domain == Domain::source ? "source" : "target";
}

Domain domain_from_string(std::string_view name) {
  if (name == "source") return Domain::source;
  if (name == "target") return Domain::target;
  throw InputError("unknown domain '" + std::string(name) + "' (expected source|target)");
}

void ModelDims::validate() const {
  if (channels < 1 || hidden < 1 || embed < 1 || key < 1 || value < 1)
    throw InputError("model dimensions must be positive");
  if (embed % 2 != 0) throw InputError("embedding dimension must be even");
  if (classes < 2) throw InputError("model needs at least two classes");
}

void PosEncConfig::validate() const {
  if (dim < 2 || dim % 2 != 0) throw InputError("positional encoding dimension must be even");
  if (max_shift < 0) throw InputError("maximum shift must be non-negative");
  if (!(base > 1)) throw InputError("positional encoding base must exceed 1");
}

namespace {

// Per-thread table of encoding rows by position; shift scans revisit the same
// positions for every sample and shift.
class EncodingTable {
 public:
  const double* row(long position, const PosEncConfig& cfg) {
    if (cfg.dim != dim_ || cfg.base != base_) reset(cfg);
    const auto p = static_cast<std::size_t>(position);
    if (p >= ready_.size()) {
      ready_.resize(p + 1, false);
      rows_.resize((p + 1) * static_cast<std::size_t>(dim_));
    }
    double* r = rows_.data() + p * static_cast<std::size_t>(dim_);
    if (!ready_[p]) {
      for (Index m = 0; m < dim_ / 2; ++m) {
        const double angle = static_cast<double>(position) / scale_[static_cast<std::size_t>(m)];
        r[2 * m] = std::sin(angle);
        r[2 * m + 1] = std::cos(angle);
      }
      ready_[p] = true;
    }
    return r;
  }

 private:
  void reset(const PosEncConfig& cfg) {
    dim_ = cfg.dim;
    base_ = cfg.base;
    scale_.resize(static_cast<std::size_t>(dim_ / 2));
    for (Index m = 0; m < dim_ / 2; ++m)
      scale_[static_cast<std::size_t>(m)] =
          std::pow(base_, static_cast<double>(2 * m) / static_cast<double>(dim_));
    rows_.clear();
    ready_.clear();
  }

  Index dim_ = 0;
  double base_ = 0;
  std::vector<double> scale_, rows_;
  std::vector<bool> ready_;
};

constexpr long kTabulatedPositions = 1 << 12;

}  // namespace

Matrix<double> positional_encoding(std::span<const int> days, const PosEncConfig& cfg) {
  thread_local EncodingTable table;
  Matrix<double> pe(static_cast<Index>(days.size()), cfg.dim);
  for (std::size_t j = 0; j < days.size(); ++j) {
    const long position = static_cast<long>(days[j]) + cfg.max_shift;
    if (position < 0)
      throw ShiftRangeError("day " + std::to_string(days[j]) + " is below -max_shift (" +
                            std::to_string(cfg.max_shift) + ")");
    if (position < kTabulatedPositions) {
      const double* r = table.row(position, cfg);
      for (Index c = 0; c < cfg.dim; ++c) pe(static_cast<Index>(j), c) = r[c];
      continue;
    }
    for (Index m = 0; m < cfg.dim / 2; ++m) {
      const double angle = static_cast<double>(position) /
                           std::pow(cfg.base, static_cast<double>(2 * m) / static_cast<double>(cfg.dim));
      pe(static_cast<Index>(j), 2 * m) = std::sin(angle);
      pe(static_cast<Index>(j), 2 * m + 1) = std::cos(angle);
    }
  }
  return pe;
}

template <typename Scalar>
Weights<Scalar> Weights<Scalar>::zeros(const ModelDims& d) {
  Weights w;
  w.pse1_w = Matrix<Scalar>::Zero(d.hidden, d.channels);
  w.pse1_b = Vector<Scalar>::Zero(d.hidden);
  w.bn1_gamma = Vector<Scalar>::Zero(d.hidden);
  w.bn1_beta = Vector<Scalar>::Zero(d.hidden);
  w.pse2_w = Matrix<Scalar>::Zero(d.embed, d.hidden);
  w.pse2_b = Vector<Scalar>::Zero(d.embed);
  w.bn2_gamma = Vector<Scalar>::Zero(d.embed);
  w.bn2_beta = Vector<Scalar>::Zero(d.embed);
  w.pse3_w = Matrix<Scalar>::Zero(d.embed, 2 * d.embed);
  w.pse3_b = Vector<Scalar>::Zero(d.embed);
  w.key_w = Matrix<Scalar>::Zero(d.key, d.embed);
  w.key_b = Vector<Scalar>::Zero(d.key);
  w.value_w = Matrix<Scalar>::Zero(d.value, d.embed);
  w.value_b = Vector<Scalar>::Zero(d.value);
  w.query = Vector<Scalar>::Zero(d.key);
  w.head1_w = Matrix<Scalar>::Zero(d.hidden, d.value);
  w.head1_b = Vector<Scalar>::Zero(d.hidden);
  w.head2_w = Matrix<Scalar>::Zero(d.classes, d.hidden);
  w.head2_b = Vector<Scalar>::Zero(d.classes);
  return w;
}

template <typename Scalar>
NormStats<Scalar> NormStats<Scalar>::identity(const ModelDims& d) {
  return {Vector<Scalar>::Zero(d.hidden), Vector<Scalar>::Ones(d.hidden),
          Vector<Scalar>::Zero(d.embed), Vector<Scalar>::Ones(d.embed)};
}

template <typename Scalar>
ModelParams<Scalar> init_params(const ModelDims& dims, const PosEncConfig& posenc,
                                std::vector<std::string> class_names, std::uint64_t seed) {
  dims.validate();
  posenc.validate();
  if (posenc.dim != dims.embed)
    throw InputError("positional encoding dimension must equal the embedding dimension");
  if (static_cast<Index>(class_names.size()) != dims.classes)
    throw DimensionError("class list size does not match the class dimension");

  ModelParams<Scalar> p;
  p.dims = dims;
  p.posenc = posenc;
  p.class_names = std::move(class_names);
  p.weights = Weights<Scalar>::zeros(dims);
  p.norm = {NormStats<Scalar>::identity(dims), NormStats<Scalar>::identity(dims)};

  Rng rng(derive_seed(seed, "init"));
  auto dense = [&rng](Matrix<Scalar>& w, Vector<Scalar>& b) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(w.cols()));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (Index j = 0; j < w.size(); ++j) w.data()[j] = static_cast<Scalar>(u(rng));
    for (Index j = 0; j < b.size(); ++j) b[j] = static_cast<Scalar>(u(rng));
  };
  auto& w = p.weights;
  dense(w.pse1_w, w.pse1_b);
  dense(w.pse2_w, w.pse2_b);
  dense(w.pse3_w, w.pse3_b);
  dense(w.key_w, w.key_b);
  dense(w.value_w, w.value_b);
  dense(w.head1_w, w.head1_b);
  dense(w.head2_w, w.head2_b);
  w.bn1_gamma.setOnes();
  w.bn2_gamma.setOnes();
  std::normal_distribution<double> unit(0.0, 1.0);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dims.key));
  for (Index j = 0; j < w.query.size(); ++j) w.query[j] = static_cast<Scalar>(scale * unit(rng));
  return p;
}

namespace {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

template <typename Scalar>
Matrix<Scalar> gelu(const Matrix<Scalar>& x) {
  const Scalar c = static_cast<Scalar>(kGeluC), a = static_cast<Scalar>(kGeluA);
  return (Scalar(0.5) * x.array() * (Scalar(1) + (c * (x.array() + a * x.array().cube())).tanh()))
      .matrix();
}

template <typename Scalar>
Matrix<Scalar> gelu_backward(const Matrix<Scalar>& x, const Matrix<Scalar>& grad) {
  const Scalar c = static_cast<Scalar>(kGeluC), a = static_cast<Scalar>(kGeluA);
  const auto t = (c * (x.array() + a * x.array().cube())).tanh().eval();
  const auto d = (Scalar(0.5) * (Scalar(1) + t) +
                  Scalar(0.5) * x.array() * (Scalar(1) - t.square()) * c *
                      (Scalar(1) + Scalar(3) * a * x.array().square()))
                     .eval();
  return (grad.array() * d).matrix();
}

template <typename Scalar>
Vector<Scalar> softmax(const Vector<Scalar>& z) {
  const Vector<Scalar> e = (z.array() - z.maxCoeff()).exp();
  return e / e.sum();
}

// y = gamma * x_hat + beta with x_hat from batch statistics (train) or the
// domain's running statistics (eval).
template <typename Scalar>
Matrix<Scalar> batch_norm(const Matrix<Scalar>& h, const Vector<Scalar>& gamma,
                          const Vector<Scalar>& beta, const Vector<Scalar>& running_mean,
                          const Vector<Scalar>& running_var, Mode mode,
                          BatchNormCache<Scalar>& cache) {
  const Scalar eps = static_cast<Scalar>(kBatchNormEpsilon);
  if (mode == Mode::train) {
    cache.batch_mean = h.rowwise().mean();
    Matrix<Scalar> centered = h.colwise() - cache.batch_mean;
    cache.batch_var = centered.array().square().rowwise().mean();
    cache.inv_std = (cache.batch_var.array() + eps).rsqrt();
    cache.normalized = cache.inv_std.asDiagonal() * centered;
  } else {
    cache.inv_std = (running_var.array() + eps).rsqrt();
    cache.normalized = cache.inv_std.asDiagonal() * (h.colwise() - running_mean);
  }
  return (gamma.asDiagonal() * cache.normalized).colwise() + beta;
}

template <typename Scalar>
Matrix<Scalar> batch_norm_backward(const Matrix<Scalar>& dy, const Vector<Scalar>& gamma,
                                   const BatchNormCache<Scalar>& cache, Mode mode,
                                   Vector<Scalar>& dgamma, Vector<Scalar>& dbeta) {
  dgamma = (dy.array() * cache.normalized.array()).rowwise().sum();
  dbeta = dy.rowwise().sum();
  Matrix<Scalar> dxhat = gamma.asDiagonal() * dy;
  if (mode == Mode::eval) return cache.inv_std.asDiagonal() * dxhat;
  const Vector<Scalar> mean_dxhat = dxhat.rowwise().mean();
  const Vector<Scalar> mean_dxhat_xhat =
      (dxhat.array() * cache.normalized.array()).rowwise().mean();
  Matrix<Scalar> centered = dxhat.colwise() - mean_dxhat;
  centered -= mean_dxhat_xhat.asDiagonal() * cache.normalized;
  return cache.inv_std.asDiagonal() * centered;
}

// Pixel-set encoder on stacked pixel columns: two normalised GELU layers,
// mean/std pooling per time step, one dense projection. Returns embed x steps.
template <typename Scalar>
Matrix<Scalar> encode_pixels(const ModelParams<Scalar>& p, ForwardCache<Scalar>& c) {
  const auto& w = p.weights;
  const auto& stats = p.norm_for(c.domain);
  Matrix<Scalar> h1 = (w.pse1_w * c.input).colwise() + w.pse1_b;
  c.pre1 = batch_norm(h1, w.bn1_gamma, w.bn1_beta, stats.bn1_mean, stats.bn1_var, c.mode, c.bn1);
  c.act1 = gelu(c.pre1);
  Matrix<Scalar> h2 = (w.pse2_w * c.act1).colwise() + w.pse2_b;
  c.pre2 = batch_norm(h2, w.bn2_gamma, w.bn2_beta, stats.bn2_mean, stats.bn2_var, c.mode, c.bn2);
  c.act2 = gelu(c.pre2);

  const Index embed = p.dims.embed;
  const Index groups = static_cast<Index>(c.group_start.size()) - 1;
  const Scalar pool_eps = static_cast<Scalar>(kPoolEpsilon);
  c.pooled.resize(2 * embed, groups);
  for (Index g = 0; g < groups; ++g) {
    const Index start = c.group_start[static_cast<std::size_t>(g)];
    const Index width = c.group_start[static_cast<std::size_t>(g) + 1] - start;
    const auto block = c.act2.middleCols(start, width);
    const Vector<Scalar> mean = block.rowwise().mean();
    const Vector<Scalar> var = (block.colwise() - mean).array().square().rowwise().mean();
    c.pooled.col(g).head(embed) = mean;
    c.pooled.col(g).tail(embed) = (var.array() + pool_eps).sqrt();
  }
  return (w.pse3_w * c.pooled).colwise() + w.pse3_b;
}

template <typename Scalar>
void check_shift(const PosEncConfig& cfg, int shift) {
  if (std::abs(shift) > cfg.max_shift)
    throw ShiftRangeError("shift " + std::to_string(shift) + " exceeds the model's maximum of " +
                          std::to_string(cfg.max_shift) + " days");
}

template <typename Scalar>
Matrix<Scalar> encoded_days(const PosEncConfig& cfg, std::span<const int> days, int shift) {
  check_shift<Scalar>(cfg, shift);
  std::vector<int> shifted(days.begin(), days.end());
  for (int& d : shifted) d += shift;
  return positional_encoding(shifted, cfg).transpose().template cast<Scalar>();
}

// Single-query attention pooling over the time steps of one sample.
template <typename Scalar>
Vector<Scalar> attend(const ModelParams<Scalar>& p, const Matrix<Scalar>& keys,
                      const Matrix<Scalar>& values, Vector<Scalar>& weights) {
  const Scalar scale = static_cast<Scalar>(1.0 / std::sqrt(static_cast<double>(p.dims.key)));
  const Vector<Scalar> scores = scale * (keys.transpose() * p.weights.query);
  weights = softmax(scores);
  return values * weights;
}

template <typename Scalar>
Matrix<Scalar> head_logits(const ModelParams<Scalar>& p, const Matrix<Scalar>& summary,
                           Matrix<Scalar>& pre, Matrix<Scalar>& act) {
  const auto& w = p.weights;
  pre = (w.head1_w * summary).colwise() + w.head1_b;
  act = gelu(pre);
  return (w.head2_w * act).colwise() + w.head2_b;
}

template <typename Scalar>
Matrix<Scalar> column_softmax(const Matrix<Scalar>& logits) {
  Matrix<Scalar> probs(logits.rows(), logits.cols());
  for (Index j = 0; j < logits.cols(); ++j) probs.col(j) = softmax<Scalar>(logits.col(j));
  return probs;
}

}  // namespace

template <typename Scalar>
ForwardResult<Scalar> forward(const ModelParams<Scalar>& params,
                              std::span<const data::TimeSeriesSample> batch,
                              std::span<const int> shifts, Domain domain, Mode mode) {
  if (batch.empty()) throw InputError("forward: empty batch");
  if (shifts.size() != batch.size()) throw InputError("forward: one shift per sample required");
  const auto& dims = params.dims;

  ForwardResult<Scalar> out;
  auto& c = out.cache;
  c.mode = mode;
  c.domain = domain;
  Index columns = 0, steps_total = 0;
  for (const auto& s : batch) {
    if (s.channels() != dims.channels)
      throw DimensionError("sample '" + s.id + "' has " + std::to_string(s.channels()) +
                           " channels, model expects " + std::to_string(dims.channels));
    if (s.timesteps() < 1 || s.pixels_per_step < 1)
      throw DimensionError("sample '" + s.id + "' is empty");
    columns += s.pixels.cols();
    steps_total += s.timesteps();
  }
  for (int shift : shifts) check_shift<Scalar>(params.posenc, shift);

  c.input.resize(dims.channels, columns);
  c.group_start.reserve(static_cast<std::size_t>(steps_total) + 1);
  Index col = 0, step = 0;
  for (const auto& s : batch) {
    c.steps.push_back(s.timesteps());
    c.step_offset.push_back(step);
    c.input.middleCols(col, s.pixels.cols()) = s.pixels.template cast<Scalar>();
    for (Index t = 0; t < s.timesteps(); ++t) c.group_start.push_back(col + t * s.pixels_per_step);
    col += s.pixels.cols();
    step += s.timesteps();
  }
  c.group_start.push_back(col);

  const Matrix<Scalar> embeddings = encode_pixels(params, c);

  c.tokens.resize(dims.embed, steps_total);
  for (std::size_t i = 0; i < batch.size(); ++i)
    c.tokens.middleCols(c.step_offset[i], c.steps[i]) =
        embeddings.middleCols(c.step_offset[i], c.steps[i]) +
        encoded_days<Scalar>(params.posenc, batch[i].days, shifts[i]);
  const auto& w = params.weights;
  c.keys = (w.key_w * c.tokens).colwise() + w.key_b;
  c.values = (w.value_w * c.tokens).colwise() + w.value_b;

  const Index b = static_cast<Index>(batch.size());
  c.summary.resize(dims.value, b);
  c.attention.resize(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Matrix<Scalar> k = c.keys.middleCols(c.step_offset[i], c.steps[i]);
    const Matrix<Scalar> v = c.values.middleCols(c.step_offset[i], c.steps[i]);
    c.summary.col(static_cast<Index>(i)) = attend(params, k, v, c.attention[i]);
  }
  out.logits = head_logits(params, c.summary, c.head_pre, c.head_act);
  out.probs = column_softmax(out.logits);
  return out;
}

template <typename Scalar>
ForwardResult<Scalar> forward(const ModelParams<Scalar>& params, const data::TimeSeriesSample& sample,
                              int shift, Domain domain, Mode mode) {
  const int shifts[1] = {shift};
  return forward(params, std::span<const data::TimeSeriesSample>(&sample, 1),
                 std::span<const int>(shifts), domain, mode);
}

template <typename Scalar>
Matrix<Scalar> embed_timesteps(const ModelParams<Scalar>& params,
                               const data::TimeSeriesSample& sample, Domain domain) {
  if (sample.channels() != params.dims.channels)
    throw DimensionError("sample '" + sample.id + "' has " + std::to_string(sample.channels()) +
                         " channels, model expects " + std::to_string(params.dims.channels));
  ForwardCache<Scalar> c;
  c.mode = Mode::eval;
  c.domain = domain;
  c.input = sample.pixels.template cast<Scalar>();
  for (Index t = 0; t <= sample.timesteps(); ++t) c.group_start.push_back(t * sample.pixels_per_step);
  return encode_pixels(params, c);
}

template <typename Scalar>
Vector<Scalar> classify_embeddings(const ModelParams<Scalar>& params,
                                   const Matrix<Scalar>& embeddings, std::span<const int> days,
                                   int shift, Vector<Scalar>* attention) {
  const auto& w = params.weights;
  const Matrix<Scalar> tokens = embeddings + encoded_days<Scalar>(params.posenc, days, shift);
  const Matrix<Scalar> keys = (w.key_w * tokens).colwise() + w.key_b;
  const Matrix<Scalar> values = (w.value_w * tokens).colwise() + w.value_b;
  Vector<Scalar> weights;
  const Matrix<Scalar> summary = attend(params, keys, values, weights);
  Matrix<Scalar> pre, act;
  const Matrix<Scalar> logits = head_logits(params, summary, pre, act);
  if (attention) *attention = weights;
  return softmax<Scalar>(logits.col(0));
}

template <typename Scalar>
Vector<Scalar> predict(const ModelParams<Scalar>& params, const data::TimeSeriesSample& sample,
                       int shift, Domain domain) {
  return classify_embeddings(params, embed_timesteps(params, sample, domain), sample.days, shift);
}

template <typename Scalar>
void update_running_stats(ModelParams<Scalar>& params, const ForwardCache<Scalar>& cache,
                          double momentum) {
  if (cache.mode != Mode::train) return;
  auto& stats = params.norm_for(cache.domain);
  const Scalar keep = static_cast<Scalar>(momentum), take = static_cast<Scalar>(1.0 - momentum);
  stats.bn1_mean = keep * stats.bn1_mean + take * cache.bn1.batch_mean;
  stats.bn1_var = keep * stats.bn1_var + take * cache.bn1.batch_var;
  stats.bn2_mean = keep * stats.bn2_mean + take * cache.bn2.batch_mean;
  stats.bn2_var = keep * stats.bn2_var + take * cache.bn2.batch_var;
}

double focal_loss(const Eigen::Ref<const Eigen::VectorXd>& probs, int label, double gamma) {
  const double p = std::clamp(probs[label], 1e-12, 1.0);
  return -std::pow(1.0 - p, gamma) * std::log(p);
}

template <typename Scalar>
LossGradient<Scalar> focal_loss_gradient(const Matrix<Scalar>& probs, std::span<const int> labels,
                                         std::span<const double> weights, double gamma) {
  if (static_cast<Index>(labels.size()) != probs.cols() || weights.size() != labels.size())
    throw InputError("focal_loss_gradient: size mismatch");
  LossGradient<Scalar> out;
  out.dlogits = Matrix<Scalar>::Zero(probs.rows(), probs.cols());
  for (Index i = 0; i < probs.cols(); ++i) {
    const double w = weights[static_cast<std::size_t>(i)];
    if (w == 0.0) continue;
    const int y = labels[static_cast<std::size_t>(i)];
    const Eigen::VectorXd col = probs.col(i).template cast<double>();
    out.loss += w * focal_loss(col, y, gamma);
    const double p = col[y];
    if (p < 1e-12) continue;  // clamped region: flat
    // dL/dp for L = -(1-p)^g ln p, then chain through the softmax.
    const double q = 1.0 - p;
    double dl_dp = -std::pow(q, gamma) / p;
    if (q > 0 && gamma != 0.0) dl_dp += gamma * std::pow(q, gamma - 1.0) * std::log(p);
    for (Index j = 0; j < probs.rows(); ++j) {
      const double dp_dz = p * ((j == y ? 1.0 : 0.0) - col[j]);
      out.dlogits(j, i) = static_cast<Scalar>(w * dl_dp * dp_dz);
    }
  }
  return out;
}

template <typename Scalar>
Weights<Scalar> backward(const ModelParams<Scalar>& params, const ForwardCache<Scalar>& c,
                         const Matrix<Scalar>& dlogits) {
  const auto& w = params.weights;
  const auto& dims = params.dims;
  if (c.summary.cols() == 0 || dlogits.cols() != c.summary.cols() || dlogits.rows() != dims.classes)
    throw InputError("backward: forward cache missing or does not match the gradient");
  Weights<Scalar> g;

  // Head.
  g.head2_w = dlogits * c.head_act.transpose();
  g.head2_b = dlogits.rowwise().sum();
  const Matrix<Scalar> dhead = gelu_backward<Scalar>(c.head_pre, w.head2_w.transpose() * dlogits);
  g.head1_w = dhead * c.summary.transpose();
  g.head1_b = dhead.rowwise().sum();
  const Matrix<Scalar> dsummary = w.head1_w.transpose() * dhead;

  // Attention.
  const Scalar scale = static_cast<Scalar>(1.0 / std::sqrt(static_cast<double>(dims.key)));
  Matrix<Scalar> dkeys(c.keys.rows(), c.keys.cols());
  Matrix<Scalar> dvalues(c.values.rows(), c.values.cols());
  g.query = Vector<Scalar>::Zero(dims.key);
  for (std::size_t i = 0; i < c.steps.size(); ++i) {
    const Index off = c.step_offset[i], len = c.steps[i];
    const Vector<Scalar>& a = c.attention[i];
    const Vector<Scalar> dout = dsummary.col(static_cast<Index>(i));
    dvalues.middleCols(off, len) = dout * a.transpose();
    const Vector<Scalar> da = c.values.middleCols(off, len).transpose() * dout;
    const Vector<Scalar> dscores = (a.array() * (da.array() - a.dot(da))).matrix();
    g.query += scale * (c.keys.middleCols(off, len) * dscores);
    dkeys.middleCols(off, len) = scale * (w.query * dscores.transpose());
  }
  g.key_w = dkeys * c.tokens.transpose();
  g.key_b = dkeys.rowwise().sum();
  g.value_w = dvalues * c.tokens.transpose();
  g.value_b = dvalues.rowwise().sum();
  const Matrix<Scalar> dembed = w.key_w.transpose() * dkeys + w.value_w.transpose() * dvalues;

  // Pixel-set encoder.
  g.pse3_w = dembed * c.pooled.transpose();
  g.pse3_b = dembed.rowwise().sum();
  const Matrix<Scalar> dpooled = w.pse3_w.transpose() * dembed;
  const Index embed = dims.embed;
  Matrix<Scalar> dact2(c.act2.rows(), c.act2.cols());
  for (Index grp = 0; grp + 1 < static_cast<Index>(c.group_start.size()); ++grp) {
    const Index start = c.group_start[static_cast<std::size_t>(grp)];
    const Index width = c.group_start[static_cast<std::size_t>(grp) + 1] - start;
    const auto block = c.act2.middleCols(start, width);
    const Vector<Scalar> mean = c.pooled.col(grp).head(embed);
    const Vector<Scalar> stddev = c.pooled.col(grp).tail(embed);
    const Scalar inv_n = Scalar(1) / static_cast<Scalar>(width);
    const Vector<Scalar> dmean = dpooled.col(grp).head(embed) * inv_n;
    const Vector<Scalar> dstd_scaled =
        (dpooled.col(grp).tail(embed).array() / stddev.array()).matrix() * inv_n;
    dact2.middleCols(start, width) =
        (dstd_scaled.asDiagonal() * (block.colwise() - mean)).colwise() + dmean;
  }
  const Matrix<Scalar> dpre2 = gelu_backward<Scalar>(c.pre2, dact2);
  const Matrix<Scalar> dh2 =
      batch_norm_backward<Scalar>(dpre2, w.bn2_gamma, c.bn2, c.mode, g.bn2_gamma, g.bn2_beta);
  g.pse2_w = dh2 * c.act1.transpose();
  g.pse2_b = dh2.rowwise().sum();
  const Matrix<Scalar> dpre1 = gelu_backward<Scalar>(c.pre1, w.pse2_w.transpose() * dh2);
  const Matrix<Scalar> dh1 =
      batch_norm_backward<Scalar>(dpre1, w.bn1_gamma, c.bn1, c.mode, g.bn1_gamma, g.bn1_beta);
  g.pse1_w = dh1 * c.input.transpose();
  g.pse1_b = dh1.rowwise().sum();
  return g;
}

template <typename Scalar>
bool all_finite(const Weights<Scalar>& w) {
  bool ok = true;
  w.for_each([&ok](std::string_view, const auto& t) { ok = ok && t.allFinite(); });
  return ok;
}

#define TMLAB_INSTANTIATE(S)                                                                       \
  template struct Weights<S>;                                                                      \
  template struct NormStats<S>;                                                                    \
  template ModelParams<S> init_params<S>(const ModelDims&, const PosEncConfig&,                    \
                                         std::vector<std::string>, std::uint64_t);                 \
  template ForwardResult<S> forward<S>(const ModelParams<S>&,                                      \
                                       std::span<const data::TimeSeriesSample>,                    \
                                       std::span<const int>, Domain, Mode);                        \
  template ForwardResult<S> forward<S>(const ModelParams<S>&, const data::TimeSeriesSample&, int,  \
                                       Domain, Mode);                                              \
  template Matrix<S> embed_timesteps<S>(const ModelParams<S>&, const data::TimeSeriesSample&,      \
                                        Domain);                                                   \
  template Vector<S> classify_embeddings<S>(const ModelParams<S>&, const Matrix<S>&,               \
                                            std::span<const int>, int, Vector<S>*);                \
  template Vector<S> predict<S>(const ModelParams<S>&, const data::TimeSeriesSample&, int, Domain); \
  template void update_running_stats<S>(ModelParams<S>&, const ForwardCache<S>&, double);          \
  template LossGradient<S> focal_loss_gradient<S>(const Matrix<S>&, std::span<const int>,          \
                                                  std::span<const double>, double);                \
  template Weights<S> backward<S>(const ModelParams<S>&, const ForwardCache<S>&, const Matrix<S>&); \
  template bool all_finite<S>(const Weights<S>&);

TMLAB_INSTANTIATE(float)
TMLAB_INSTANTIATE(double)

#undef TMLAB_INSTANTIATE

}  // namespace tmlab::model
