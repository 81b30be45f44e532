#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "xmodal/rng.hpp"

namespace xmodal {

using Shape = std::vector<int>;

std::size_t numel(const Shape& s);
std::string shape_str(const Shape& s);

/// Dense tensor node with reverse-mode autodiff. Data is stored flat,
/// row-major, as 64-bit floats. Shapes are fixed at construction. Nodes
/// created while gradients are enabled carry a backward closure plus the
/// input edges that make up the computation graph.
class Tensor {
public:
    std::vector<double> data;
    Shape shape;
    bool requires_grad = false;
    std::vector<double> grad; // sized lazily on first backward touch

    std::vector<std::shared_ptr<Tensor>> prev;
    std::function<void()> backward_fn; // owned by this node; captures prev by value
    std::string op;

    Tensor() = default;
    Tensor(std::vector<double> d, Shape s, bool rg);

    std::size_t size() const { return data.size(); }
    int rows() const { return shape.empty() ? 1 : shape[0]; }
    int cols() const { return shape.size() < 2 ? 1 : shape[1]; }
    double item() const;

    void ensure_grad();
    void zero_grad();
};

using TensorPtr = std::shared_ptr<Tensor>;

TensorPtr make_tensor(std::vector<double> data, Shape shape, bool requires_grad = false);
TensorPtr zeros(Shape shape, bool requires_grad = false);
TensorPtr full(Shape shape, double value, bool requires_grad = false);
TensorPtr scalar_tensor(double value, bool requires_grad = false);
TensorPtr randn(Shape shape, Rng& rng, double std = 1.0, bool requires_grad = false);
TensorPtr truncated_normal(Shape shape, Rng& rng, double std, bool requires_grad = true);

/// Thread-local switch; while disabled, ops compute values but record no
/// graph edges. Used for evaluation passes.
bool grad_enabled();
struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    bool prev_;
};

/// Reverse-mode sweep from a scalar loss. Topological order is derived from
/// the graph itself, so identical graphs give bit-identical gradients.
/// Nodes that do not reach the loss keep zero gradients.
void backward(const TensorPtr& loss);

// ---- differentiable primitives -------------------------------------------
// Every op checks shapes and reports both sides on mismatch.

TensorPtr add(const TensorPtr& a, const TensorPtr& b);
TensorPtr sub(const TensorPtr& a, const TensorPtr& b);
TensorPtr mul(const TensorPtr& a, const TensorPtr& b);
TensorPtr scale(const TensorPtr& a, double c);
TensorPtr add_scalar(const TensorPtr& a, double c);
TensorPtr square(const TensorPtr& a);
TensorPtr sqrt_eps(const TensorPtr& a, double eps);
TensorPtr log_op(const TensorPtr& a);
TensorPtr relu(const TensorPtr& a);
TensorPtr gelu(const TensorPtr& a);

TensorPtr matmul(const TensorPtr& a, const TensorPtr& b);
TensorPtr transpose(const TensorPtr& a);
/// y = x * W^T + b with W stored [out, in].
TensorPtr linear(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b);

/// 1-D strided convolution. x is [T, Cin]; w is [Cout, Cin, K]; b is [Cout].
/// Zero padding on both ends. Output [T_out, Cout] with
/// T_out = (T + 2*padding - K) / stride + 1.
TensorPtr conv1d(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b, int stride,
                 int padding);
int conv1d_out_len(int in_len, int kernel, int stride, int padding);

/// Row gather: table [V, d], indices into V; output [N, d].
TensorPtr embedding(const TensorPtr& table, const std::vector<int>& indices);

TensorPtr softmax_rows(const TensorPtr& a);
TensorPtr layer_norm(const TensorPtr& x, const TensorPtr& gain, const TensorPtr& bias,
                     double eps = 1e-5);
/// x [T, C]; statistics per group over all rows and the group's channels.
TensorPtr group_norm(const TensorPtr& x, int groups, const TensorPtr& gain, const TensorPtr& bias,
                     double eps = 1e-5);

struct BatchNormBuffers {
    std::vector<double> running_mean;
    std::vector<double> running_var;
    long long steps = 0;
};
/// x [B, F]. Train mode normalizes with batch statistics and updates the
/// running buffers; eval mode uses the buffers only.
TensorPtr batch_norm(const TensorPtr& x, const TensorPtr& gain, const TensorPtr& bias,
                     BatchNormBuffers& buffers, bool train, double momentum = 0.1,
                     double eps = 1e-5);

TensorPtr mean_all(const TensorPtr& a);
TensorPtr sum_all(const TensorPtr& a);
TensorPtr mean_axis0(const TensorPtr& a); // [R, C] -> [C]
TensorPtr sum_axis0(const TensorPtr& a);  // [R, C] -> [C]
TensorPtr mean_pool_rows(const TensorPtr& a); // [T, d] -> [d]
/// Mean over rows with mask[t] != 0; rejects an all-zero mask.
TensorPtr masked_mean_pool(const TensorPtr& a, const std::vector<double>& mask);

TensorPtr stack_rows(const std::vector<TensorPtr>& rows); // B x [d] -> [B, d]
TensorPtr slice_cols(const TensorPtr& a, int c0, int c1);
TensorPtr slice_rows(const TensorPtr& a, int r0, int r1);
TensorPtr concat_cols(const TensorPtr& a, const TensorPtr& b);
/// Row vector r ([d] or [1, d]) broadcast over the rows of x.
TensorPtr add_row_broadcast(const TensorPtr& x, const TensorPtr& r);
TensorPtr sub_row_broadcast(const TensorPtr& x, const TensorPtr& r);
TensorPtr mul_row_broadcast(const TensorPtr& x, const TensorPtr& r);
/// Column vector c ([T] or [T, 1]) scales row t of x.
TensorPtr mul_col_broadcast(const TensorPtr& x, const TensorPtr& c);

/// Sum of squared off-diagonal entries of a square matrix.
TensorPtr sum_sq_offdiag(const TensorPtr& a);

/// View with a new shape of identical element count.
TensorPtr reshape(const TensorPtr& a, Shape s);

/// Per-row z-score normalization, (x - mean) / (std + eps), biased std.
TensorPtr znorm_rows(const TensorPtr& a, double eps = 1e-5);

/// Inverted dropout. Train mode draws the mask from rng; eval is identity.
TensorPtr dropout(const TensorPtr& a, double p, Rng& rng, bool train);

/// softmax(Q K^T / sqrt(dk)) V, single head. Optional additive mask
/// [rows(K)] applied to every score row (use large negatives to hide keys).
TensorPtr scaled_dot_attention(const TensorPtr& q, const TensorPtr& k, const TensorPtr& v,
                               const std::vector<double>* key_mask = nullptr);

} // namespace xmodal
