#pragma once

#include "kunpeng/tensor.hpp"

#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace kp::ad {

template <typename Scalar>
struct Node {
  Tensor<Scalar> value;
  Tensor<Scalar> grad;  // empty until something flows into it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this->grad and accumulates into parents that require grad.
  std::function<void(Node&)> backward;

  Tensor<Scalar>& grad_buffer() {
    if (grad.empty()) grad = Tensor<Scalar>::zeros(value.shape());
    return grad;
  }
};

/// Handle to a node of the differentiation graph. Copies share the node.
template <typename Scalar>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<Scalar> value, bool requires_grad = false)
      : node_(std::make_shared<Node<Scalar>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<Scalar>> node) : node_(std::move(node)) {}

  const Tensor<Scalar>& value() const { return node_->value; }
  Tensor<Scalar>& mutable_value() { return node_->value; }
  const Tensor<Scalar>& grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  bool requires_grad() const { return node_->requires_grad; }
  const Shape& shape() const { return node_->value.shape(); }
  Index size() const { return node_->value.size(); }
  void zero_grad() { node_->grad = Tensor<Scalar>(); }

  const std::shared_ptr<Node<Scalar>>& node() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node<Scalar>> node_;
};

/// Disables graph recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};
bool grad_enabled();

/// Reverse-mode sweep from a scalar root. Leaves accumulate into existing
/// grads; call ParamStore::zero_grad between steps.
template <typename Scalar>
void backward(const Var<Scalar>& root);

// -- elementwise / reductions -------------------------------------------------

template <typename Scalar> Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar> Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar> Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar> Var<Scalar> scale(const Var<Scalar>& a, Scalar s);
template <typename Scalar> Var<Scalar> sum(const Var<Scalar>& a);
template <typename Scalar> Var<Scalar> gelu(const Var<Scalar>& x);

template <typename Scalar>
Var<Scalar> operator+(const Var<Scalar>& a, const Var<Scalar>& b) { return add(a, b); }
template <typename Scalar>
Var<Scalar> operator-(const Var<Scalar>& a, const Var<Scalar>& b) { return sub(a, b); }
template <typename Scalar>
Var<Scalar> operator*(const Var<Scalar>& a, const Var<Scalar>& b) { return mul(a, b); }

/// Channel concatenation of (C_i, ...) tensors sharing trailing dims.
template <typename Scalar>
Var<Scalar> concat_channels(std::span<const Var<Scalar>> parts);

// -- channel mixing -----------------------------------------------------------

/// Per-position affine map over the leading (channel) axis.
/// x: (C_in, ...), weight: (C_out, C_in), bias: (C_out) or empty.
template <typename Scalar>
Var<Scalar> linear(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias);

inline constexpr double kLayerNormEps = 1e-5;

/// Normalizes the channel vector at every position, then applies gain/bias.
template <typename Scalar>
Var<Scalar> layer_norm(const Var<Scalar>& x, const Var<Scalar>& gain, const Var<Scalar>& bias);

// -- convolutions -------------------------------------------------------------

enum class PadMode { zero, cyclic_lon };

struct Conv2dOptions {
  Index stride = 1;
  Index padding = 0;
  PadMode pad_mode = PadMode::zero;
  Index groups = 1;
};

/// Cross-correlation. x: (C_in, H, W); weight: (C_out, C_in / groups, kh, kw);
/// bias: (C_out) or empty. cyclic_lon wraps columns and zero-pads rows.
template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias,
                   const Conv2dOptions& opts);

/// Adjoint of conv2d (zero padding). x: (C_in, H, W); weight: (C_in, C_out, kh, kw).
/// Output: (C_out, (H - 1) * stride + kh, (W - 1) * stride + kw).
template <typename Scalar>
Var<Scalar> conv2d_transpose(const Var<Scalar>& x, const Var<Scalar>& weight,
                             const Var<Scalar>& bias, Index stride);

// -- sampling -----------------------------------------------------------------

enum class LatBoundary {
  clamp,  // rows outside [0, H-1] read the edge row
  zero,   // rows outside [0, H-1] read zero
};

/// Bilinear sampling with periodic longitude. x: (C, H, W);
/// coords: (P, 2) of (row, col) in grid cells. Returns (C, P).
template <typename Scalar>
Var<Scalar> bilinear_sample_cyclic(const Var<Scalar>& x, const Var<Scalar>& coords,
                                   LatBoundary lat = LatBoundary::clamp);

enum class Modulation {
  linear,   // m = 1 + raw
  sigmoid,  // m = 2 * sigmoid(raw)
};

struct DeformOptions {
  Index heads = 8;
  Index kernel_h = 3;
  Index kernel_w = 3;
  Modulation modulation = Modulation::linear;
  LatBoundary lat = LatBoundary::zero;
};

/// Grouped deformable convolution with periodic longitude (stride 1, "same"
/// padding). x: (C, H, W); offsets: (heads * kh * kw * 3, H, W) holding
/// (d_row, d_col, raw modulation) per head and tap; weight: (C, C / heads, kh, kw).
/// With zero offsets and unit modulation this is conv2d(groups = heads,
/// cyclic_lon, padding kh / 2).
template <typename Scalar>
Var<Scalar> deform_conv_cyclic(const Var<Scalar>& x, const Var<Scalar>& offsets,
                               const Var<Scalar>& weight, const Var<Scalar>& bias,
                               const DeformOptions& opts);

// -- losses -------------------------------------------------------------------

/// sum(cell_weight * |pred - truth|) / pred.size(). cell_weight is the
/// mask times latitude weight per cell; truth and weights are constants.
template <typename Scalar>
Var<Scalar> weighted_l1(const Var<Scalar>& pred, const Tensor<Scalar>& truth,
                        const Tensor<Scalar>& cell_weight);

// -- parameters ---------------------------------------------------------------

/// Named trainable leaves in label order (std::map keeps iteration stable).
template <typename Scalar>
class ParamStore {
 public:
  Var<Scalar> add(const std::string& label, Tensor<Scalar> init);
  const Var<Scalar>& get(const std::string& label) const;
  bool contains(const std::string& label) const { return params_.count(label) > 0; }
  std::size_t erase_prefix(const std::string& prefix);
  void zero_grad();
  Index scalar_count() const;
  std::size_t size() const { return params_.size(); }

  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::map<std::string, Var<Scalar>> params_;
};

/// Label -> tensor map as stored in a checkpoint container.
using TensorMap = std::map<std::string, Tensor<float>>;

template <typename Scalar>
TensorMap snapshot(const ParamStore<Scalar>& store);

/// Copies values into matching labels; missing or mis-shaped labels throw.
template <typename Scalar>
void assign(ParamStore<Scalar>& store, const TensorMap& values, bool allow_extra = false);

/// Container: "KPCK", u32 version, u32 count, u32 manifest_len, manifest JSON
/// (array of labels), then per label: u32 rank, u32 dims..., f32 data.
/// Everything little-endian. Rejects non-finite values on save.
void save_checkpoint(const std::string& path, const TensorMap& params);
TensorMap load_checkpoint(const std::string& path);

/// Uniform in +-sqrt(1 / fan_in).
template <typename Scalar>
Tensor<Scalar> init_fan_in(Shape shape, Index fan_in, Rng& rng);

}  // namespace kp::ad
