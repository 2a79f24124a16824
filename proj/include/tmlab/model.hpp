#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "tmlab/sits_data.hpp"

// Pixel-set temporal classifier: a per-pixel MLP with batch normalisation,
// mean/std pooling over the pixel set, sinusoidal day-of-year encoding,
// single-query attention over time and a two-layer classifier head.
//
// Activations are laid out one column per item (pixel, time step or sample),
// matching the column-major pixel payload of data::TimeSeriesSample.
namespace tmlab::model {

using Eigen::Index;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

enum class Domain : int { source = 0, target = 1 };
enum class Mode { train, eval };

std::string_view to_string(Domain domain);
Domain domain_from_string(std::string_view name);

struct ModelDims {
  Index channels = 4;
  Index hidden = 64;
  Index embed = 64;
  Index key = 16;
  Index value = 64;
  Index classes = 5;

  void validate() const;
  friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

struct PosEncConfig {
  Index dim = 64;
  int max_shift = 60;
  double base = 10000.0;

  void validate() const;
  friend bool operator==(const PosEncConfig&, const PosEncConfig&) = default;
};

// Row j encodes position days[j] + max_shift: sin in even columns, cos in odd
// columns, wavelengths base^(2m/dim). Throws ShiftRangeError when a position
// is negative.
Matrix<double> positional_encoding(std::span<const int> days, const PosEncConfig& cfg);

// X-macro listing every learnable tensor with its checkpoint name.
#define TMLAB_WEIGHT_FIELDS(X)              \
  X(pse1_w, "pse.fc1.weight")               \
  X(pse1_b, "pse.fc1.bias")                 \
  X(bn1_gamma, "pse.bn1.gamma")             \
  X(bn1_beta, "pse.bn1.beta")               \
  X(pse2_w, "pse.fc2.weight")               \
  X(pse2_b, "pse.fc2.bias")                 \
  X(bn2_gamma, "pse.bn2.gamma")             \
  X(bn2_beta, "pse.bn2.beta")               \
  X(pse3_w, "pse.fc3.weight")               \
  X(pse3_b, "pse.fc3.bias")                 \
  X(key_w, "attention.key.weight")          \
  X(key_b, "attention.key.bias")            \
  X(value_w, "attention.value.weight")      \
  X(value_b, "attention.value.bias")        \
  X(query, "attention.query")               \
  X(head1_w, "head.fc1.weight")             \
  X(head1_b, "head.fc1.bias")               \
  X(head2_w, "head.fc2.weight")             \
  X(head2_b, "head.fc2.bias")

#define TMLAB_NORM_FIELDS(X)  \
  X(bn1_mean, "bn1.mean")     \
  X(bn1_var, "bn1.var")       \
  X(bn2_mean, "bn2.mean")     \
  X(bn2_var, "bn2.var")

// Learnable tensors. Also used for gradients and optimizer moments.
template <typename Scalar>
struct Weights {
  Matrix<Scalar> pse1_w;  // hidden x channels
  Vector<Scalar> pse1_b;
  Vector<Scalar> bn1_gamma;
  Vector<Scalar> bn1_beta;
  Matrix<Scalar> pse2_w;  // embed x hidden
  Vector<Scalar> pse2_b;
  Vector<Scalar> bn2_gamma;
  Vector<Scalar> bn2_beta;
  Matrix<Scalar> pse3_w;  // embed x 2*embed
  Vector<Scalar> pse3_b;
  Matrix<Scalar> key_w;  // key x embed
  Vector<Scalar> key_b;
  Matrix<Scalar> value_w;  // value x embed
  Vector<Scalar> value_b;
  Vector<Scalar> query;    // key
  Matrix<Scalar> head1_w;  // hidden x value
  Vector<Scalar> head1_b;
  Matrix<Scalar> head2_w;  // classes x hidden
  Vector<Scalar> head2_b;

  static Weights zeros(const ModelDims& dims);

  template <typename F>
  void for_each(F&& f) {
#define TMLAB_VISIT(member, name) f(std::string_view(name), member);
    TMLAB_WEIGHT_FIELDS(TMLAB_VISIT)
#undef TMLAB_VISIT
  }
  template <typename F>
  void for_each(F&& f) const {
#define TMLAB_VISIT(member, name) f(std::string_view(name), member);
    TMLAB_WEIGHT_FIELDS(TMLAB_VISIT)
#undef TMLAB_VISIT
  }

  template <typename T>
  Weights<T> cast() const {
    Weights<T> out;
#define TMLAB_VISIT(member, name) out.member = member.template cast<T>();
    TMLAB_WEIGHT_FIELDS(TMLAB_VISIT)
#undef TMLAB_VISIT
    return out;
  }
};

// Visits matching tensors of several weight sets in declaration order.
template <typename F, typename... Ws>
void zip_weights(F&& f, Ws&... ws) {
#define TMLAB_VISIT(member, name) f(std::string_view(name), ws.member...);
  TMLAB_WEIGHT_FIELDS(TMLAB_VISIT)
#undef TMLAB_VISIT
}

// Running batch-norm statistics of one domain.
template <typename Scalar>
struct NormStats {
  Vector<Scalar> bn1_mean;
  Vector<Scalar> bn1_var;
  Vector<Scalar> bn2_mean;
  Vector<Scalar> bn2_var;

  static NormStats identity(const ModelDims& dims);

  template <typename F>
  void for_each(F&& f) {
#define TMLAB_VISIT(member, name) f(std::string_view(name), member);
    TMLAB_NORM_FIELDS(TMLAB_VISIT)
#undef TMLAB_VISIT
  }
  template <typename F>
  void for_each(F&& f) const {
#define TMLAB_VISIT(member, name) f(std::string_view(name), member);
    TMLAB_NORM_FIELDS(TMLAB_VISIT)
#undef TMLAB_VISIT
  }

  template <typename T>
  NormStats<T> cast() const {
    NormStats<T> out;
#define TMLAB_VISIT(member, name) out.member = member.template cast<T>();
    TMLAB_NORM_FIELDS(TMLAB_VISIT)
#undef TMLAB_VISIT
    return out;
  }
};

template <typename F, typename... Ns>
void zip_norm_stats(F&& f, Ns&... ns) {
#define TMLAB_VISIT(member, name) f(std::string_view(name), ns.member...);
  TMLAB_NORM_FIELDS(TMLAB_VISIT)
#undef TMLAB_VISIT
}

template <typename Scalar>
struct ModelParams {
  ModelDims dims;
  PosEncConfig posenc;
  std::vector<std::string> class_names;
  Weights<Scalar> weights;
  std::array<NormStats<Scalar>, 2> norm;  // indexed by Domain

  NormStats<Scalar>& norm_for(Domain d) { return norm[static_cast<std::size_t>(d)]; }
  const NormStats<Scalar>& norm_for(Domain d) const { return norm[static_cast<std::size_t>(d)]; }

  template <typename T>
  ModelParams<T> cast() const {
    ModelParams<T> out{dims, posenc, class_names, weights.template cast<T>(), {}};
    out.norm = {norm[0].template cast<T>(), norm[1].template cast<T>()};
    return out;
  }
};

// Fan-in uniform initialisation for dense layers, unit-normal / sqrt(key) for
// the master query, identity batch norm.
template <typename Scalar>
ModelParams<Scalar> init_params(const ModelDims& dims, const PosEncConfig& posenc,
                                std::vector<std::string> class_names, std::uint64_t seed);

inline constexpr double kBatchNormEpsilon = 1e-5;
inline constexpr double kPoolEpsilon = 1e-6;

template <typename Scalar>
struct BatchNormCache {
  Matrix<Scalar> normalized;  // x_hat
  Vector<Scalar> inv_std;
  Vector<Scalar> batch_mean;
  Vector<Scalar> batch_var;
};

// Everything backward() needs from a forward pass.
template <typename Scalar>
struct ForwardCache {
  Mode mode = Mode::eval;
  Domain domain = Domain::source;
  std::vector<Index> steps;        // T_i per sample
  std::vector<Index> step_offset;  // first time-step column of sample i
  std::vector<Index> group_start;  // first pixel column of each time step, plus end
  Matrix<Scalar> input;            // C x R
  BatchNormCache<Scalar> bn1;
  BatchNormCache<Scalar> bn2;
  Matrix<Scalar> pre1, act1;  // after BN, after GELU
  Matrix<Scalar> pre2, act2;
  Matrix<Scalar> pooled;  // 2*embed x sum(T)
  Matrix<Scalar> tokens;  // embedding + positional encoding, embed x sum(T)
  Matrix<Scalar> keys;
  Matrix<Scalar> values;
  std::vector<Vector<Scalar>> attention;
  Matrix<Scalar> summary;  // value x B
  Matrix<Scalar> head_pre, head_act;
};

template <typename Scalar>
struct ForwardResult {
  Matrix<Scalar> logits;  // K x B
  Matrix<Scalar> probs;   // K x B
  ForwardCache<Scalar> cache;
};

// Batched forward pass. `shifts` holds one day offset per sample, added to its
// days before encoding. In train mode batch-norm statistics come from the
// batch (see update_running_stats); in eval mode from `domain`'s running stats.
template <typename Scalar>
ForwardResult<Scalar> forward(const ModelParams<Scalar>& params,
                              std::span<const data::TimeSeriesSample> batch,
                              std::span<const int> shifts, Domain domain, Mode mode);

template <typename Scalar>
ForwardResult<Scalar> forward(const ModelParams<Scalar>& params, const data::TimeSeriesSample& sample,
                              int shift, Domain domain, Mode mode);

// Eval-mode pixel-set embeddings of one sample (embed x T). Independent of any
// day shift, so shift scans can reuse it.
template <typename Scalar>
Matrix<Scalar> embed_timesteps(const ModelParams<Scalar>& params,
                               const data::TimeSeriesSample& sample, Domain domain);

// Temporal attention and head on precomputed embeddings. Returns K
// probabilities; writes the attention weights when `attention` is non-null.
template <typename Scalar>
Vector<Scalar> classify_embeddings(const ModelParams<Scalar>& params,
                                   const Matrix<Scalar>& embeddings, std::span<const int> days,
                                   int shift, Vector<Scalar>* attention = nullptr);

// Eval-mode class probabilities of one sample.
template <typename Scalar>
Vector<Scalar> predict(const ModelParams<Scalar>& params, const data::TimeSeriesSample& sample,
                       int shift, Domain domain);

// running <- momentum * running + (1 - momentum) * batch, for the cache's domain.
template <typename Scalar>
void update_running_stats(ModelParams<Scalar>& params, const ForwardCache<Scalar>& cache,
                          double momentum);

// -(1 - p_y)^gamma * ln(p_y), with p_y clamped to [1e-12, 1].
double focal_loss(const Eigen::Ref<const Eigen::VectorXd>& probs, int label, double gamma);

template <typename Scalar>
struct LossGradient {
  double loss = 0.0;       // sum_i w_i * focal_i
  Matrix<Scalar> dlogits;  // K x B
};

// Weighted focal loss over a batch and its gradient with respect to the logits.
template <typename Scalar>
LossGradient<Scalar> focal_loss_gradient(const Matrix<Scalar>& probs, std::span<const int> labels,
                                         std::span<const double> weights, double gamma);

// Exact gradient of sum_i <dlogits_i, logits_i> with respect to every weight.
template <typename Scalar>
Weights<Scalar> backward(const ModelParams<Scalar>& params, const ForwardCache<Scalar>& cache,
                         const Matrix<Scalar>& dlogits);

template <typename Scalar>
bool all_finite(const Weights<Scalar>& w);

}  // namespace tmlab::model
