#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace steerlab {

// Deterministic PRNG (splitmix64-seeded xoshiro256**). All randomness in the
// project flows through an explicitly threaded Rng so runs are reproducible
// across platforms; std:: distributions are implementation-defined and never
// used.
class Rng {
 public:
  explicit Rng(uint64_t seed);

  uint64_t next_u64();
  // Uniform in [0, 1).
  double uniform();
  // Standard normal via Box-Muller with a cached spare.
  double gaussian();
  // Uniform integer in [lo, hi], inclusive.
  int uniform_int(int lo, int hi);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
      int j = uniform_int(0, i);
      std::swap(v[static_cast<size_t>(i)], v[static_cast<size_t>(j)]);
    }
  }

 private:
  uint64_t state_[4];
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Dense row-major tensor of doubles. Copies share the underlying buffer;
// mutable_data() clones when the buffer is shared, so a Tensor held by a
// tape or a trace is never modified behind its back.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape);
  static Tensor full(std::vector<int> shape, double value);
  static Tensor from_values(std::vector<int> shape, std::vector<double> values);
  static Tensor scalar(double value);
  static Tensor randn(std::vector<int> shape, Rng& rng, double stddev);

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int64_t numel() const;
  bool defined() const { return static_cast<bool>(data_); }

  const double* data() const { return data_->data(); }
  double* mutable_data();

  double at(int i) const { return (*data_)[static_cast<size_t>(i)]; }
  double at(int i, int j) const {
    return (*data_)[static_cast<size_t>(i) * static_cast<size_t>(shape_[1]) + static_cast<size_t>(j)];
  }

  // Same data, new shape; element count must match.
  Tensor reshaped(std::vector<int> shape) const;

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool all_finite() const;
  bool bitwise_equal(const Tensor& other) const;
  double max_abs_diff(const Tensor& other) const;
  double norm() const;

 private:
  std::vector<int> shape_;
  std::shared_ptr<std::vector<double>> data_;
};

using ValueId = int32_t;

// Ordered record of primitive operations from one forward pass. Nodes are
// appended in execution order, so reverse creation order is a valid reverse
// topological order; grad accumulation walks it with a fixed summation
// order, making gradients run-to-run deterministic.
//
// Primitives: matmul (with transpose variants), add, mul, relu, gather_rows
// (embedding lookup / row slicing), rms_norm, log_softmax, softmax, sum,
// scale. reshape is bookkeeping only. Everything else is composed.
class Tape {
 public:
  ValueId leaf(Tensor value);

  ValueId matmul(ValueId a, ValueId b, bool trans_a = false, bool trans_b = false);
  ValueId add(ValueId a, ValueId b);
  ValueId mul(ValueId a, ValueId b);
  ValueId relu(ValueId a);
  ValueId gather_rows(ValueId table, std::vector<int> row_ids);
  ValueId rms_norm(ValueId x, ValueId gain, double eps);
  ValueId log_softmax(ValueId x);  // over the last dimension
  ValueId softmax(ValueId x);      // over the last dimension
  ValueId sum(ValueId x);          // scalar
  ValueId scale(ValueId x, double factor);
  ValueId reshape(ValueId x, std::vector<int> shape);

  const Tensor& value(ValueId id) const;
  int size() const { return static_cast<int>(nodes_.size()); }

  // d(loss)/d(target) by reverse accumulation. loss must be scalar; returns
  // zeros shaped like target when target does not influence loss.
  Tensor grad_wrt(ValueId loss, ValueId target) const;
  // One reverse sweep, many targets. Identical semantics to grad_wrt per
  // target; used for parameter gradients during training.
  std::vector<Tensor> grad_multi(ValueId loss, const std::vector<ValueId>& targets) const;

  // Re-executes every recorded op from the stored leaves and checks the
  // recomputed values match the recorded ones bit for bit.
  bool replay_matches() const;

 private:
  enum class Op : uint8_t {
    kLeaf,
    kMatMul,
    kAdd,
    kMul,
    kRelu,
    kGatherRows,
    kRmsNorm,
    kLogSoftmax,
    kSoftmax,
    kSum,
    kScale,
    kReshape,
  };

  struct Node {
    Op op = Op::kLeaf;
    ValueId in0 = -1;
    ValueId in1 = -1;
    bool trans_a = false;
    bool trans_b = false;
    double scalar_arg = 0.0;  // rms_norm eps / scale factor
    std::vector<int> row_ids; // gather_rows
    Tensor value;
  };

  ValueId push(Node node);
  void check_id(ValueId id, const char* what) const;
  Tensor compute(const Node& node, const Tensor& a, const Tensor& b) const;
  void accumulate_backward(const Node& node, const Tensor& out_grad,
                           Tensor* grad_in0, Tensor* grad_in1) const;

  std::vector<Node> nodes_;
};

// Shared forward kernels. The tape and any plain (non-recorded) computation
// use these same routines, so recorded and unrecorded paths stay bitwise
// identical.
namespace kernels {
// variant: 0 = A*B, 1 = A*B^T, 2 = A^T*B. Accumulates into out.
void matmul_acc(double* out, const double* a, const double* b, int m, int k, int n, int variant);
void log_softmax_lastdim(double* out, const double* in, int64_t outer, int width);
void softmax_lastdim(double* out, const double* in, int64_t outer, int width);
void rms_norm_rows(double* out, const double* x, const double* gain, int64_t rows, int width, double eps);
}  // namespace kernels

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);
Tensor log_softmax(const Tensor& logits);
Tensor softmax(const Tensor& logits);
Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps);

}  // namespace steerlab
