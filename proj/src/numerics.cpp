#include "steerlab/numerics.hpp"

#include <cmath>
#include <cstring>
#include <limits>
#include <stdexcept>

namespace steerlab {

namespace {

uint64_t splitmix64(uint64_t& x) {
  x += 0x9E3779B97F4A7C15ull;
  uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

int64_t shape_numel(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) {
    if (d < 0) throw std::invalid_argument("tensor dimension must be nonnegative");
    n *= d;
  }
  return n;
}

}  // namespace

Rng::Rng(uint64_t seed) {
  uint64_t s = seed;
  for (auto& w : state_) w = splitmix64(s);
}

uint64_t Rng::next_u64() {
  uint64_t result = rotl(state_[1] * 5, 7) * 9;
  uint64_t t = state_[1] << 17;
  state_[2] ^= state_[0];
  state_[3] ^= state_[1];
  state_[1] ^= state_[2];
  state_[0] ^= state_[3];
  state_[2] ^= t;
  state_[3] = rotl(state_[3], 45);
  return result;
}

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::gaussian() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = 1.0 - uniform();  // (0, 1]
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double theta = 2.0 * 3.14159265358979323846 * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

int Rng::uniform_int(int lo, int hi) {
  if (lo > hi) throw std::invalid_argument("uniform_int: empty range");
  uint64_t span = static_cast<uint64_t>(hi) - static_cast<uint64_t>(lo) + 1;
  uint64_t limit = UINT64_MAX - UINT64_MAX % span;
  uint64_t r = next_u64();
  while (r >= limit) r = next_u64();
  return lo + static_cast<int>(r % span);
}

Tensor Tensor::zeros(std::vector<int> shape) {
  Tensor t;
  int64_t n = shape_numel(shape);
  t.shape_ = std::move(shape);
  t.data_ = std::make_shared<std::vector<double>>(static_cast<size_t>(n), 0.0);
  return t;
}

Tensor Tensor::full(std::vector<int> shape, double value) {
  Tensor t = zeros(std::move(shape));
  for (double& v : *t.data_) v = value;
  return t;
}

Tensor Tensor::from_values(std::vector<int> shape, std::vector<double> values) {
  int64_t n = shape_numel(shape);
  if (n != static_cast<int64_t>(values.size())) {
    throw std::invalid_argument("from_values: element count does not match shape");
  }
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = std::make_shared<std::vector<double>>(std::move(values));
  return t;
}

Tensor Tensor::scalar(double value) { return from_values({}, {value}); }

Tensor Tensor::randn(std::vector<int> shape, Rng& rng, double stddev) {
  Tensor t = zeros(std::move(shape));
  for (double& v : *t.data_) v = rng.gaussian() * stddev;
  return t;
}

int64_t Tensor::numel() const {
  if (!data_) return 0;
  return static_cast<int64_t>(data_->size());
}

double* Tensor::mutable_data() {
  if (!data_) throw std::runtime_error("mutable_data on undefined tensor");
  if (data_.use_count() > 1) {
    data_ = std::make_shared<std::vector<double>>(*data_);
  }
  return data_->data();
}

Tensor Tensor::reshaped(std::vector<int> shape) const {
  if (shape_numel(shape) != numel()) {
    throw std::invalid_argument("reshaped: element count mismatch");
  }
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = data_;
  return t;
}

bool Tensor::all_finite() const {
  for (double v : *data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

bool Tensor::bitwise_equal(const Tensor& other) const {
  if (shape_ != other.shape_) return false;
  if (data_ == other.data_) return true;
  return std::memcmp(data_->data(), other.data_->data(), data_->size() * sizeof(double)) == 0;
}

double Tensor::max_abs_diff(const Tensor& other) const {
  if (shape_ != other.shape_) throw std::invalid_argument("max_abs_diff: shape mismatch");
  double m = 0.0;
  for (size_t i = 0; i < data_->size(); ++i) {
    m = std::max(m, std::fabs((*data_)[i] - (*other.data_)[i]));
  }
  return m;
}

double Tensor::norm() const {
  double s = 0.0;
  for (double v : *data_) s += v * v;
  return std::sqrt(s);
}

namespace kernels {

void matmul_acc(double* out, const double* a, const double* b, int m, int k, int n, int variant) {
  if (variant == 0) {
    // out[i][j] += sum_p a[i][p] * b[p][j]
    for (int i = 0; i < m; ++i) {
      const double* arow = a + static_cast<size_t>(i) * k;
      double* orow = out + static_cast<size_t>(i) * n;
      for (int p = 0; p < k; ++p) {
        double av = arow[p];
        const double* brow = b + static_cast<size_t>(p) * n;
        for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
      }
    }
  } else if (variant == 1) {
    // out[i][j] += sum_p a[i][p] * b[j][p]
    for (int i = 0; i < m; ++i) {
      const double* arow = a + static_cast<size_t>(i) * k;
      double* orow = out + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) {
        const double* brow = b + static_cast<size_t>(j) * k;
        double acc = 0.0;
        for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
        orow[j] += acc;
      }
    }
  } else {
    // out[i][j] += sum_p a[p][i] * b[p][j]
    for (int p = 0; p < k; ++p) {
      const double* arow = a + static_cast<size_t>(p) * m;
      const double* brow = b + static_cast<size_t>(p) * n;
      for (int i = 0; i < m; ++i) {
        double av = arow[i];
        double* orow = out + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
      }
    }
  }
}

void log_softmax_lastdim(double* out, const double* in, int64_t outer, int width) {
  for (int64_t r = 0; r < outer; ++r) {
    const double* x = in + r * width;
    double* y = out + r * width;
    double mx = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < width; ++i) mx = std::max(mx, x[i]);
    double z = 0.0;
    for (int i = 0; i < width; ++i) z += std::exp(x[i] - mx);
    double lz = std::log(z);
    for (int i = 0; i < width; ++i) y[i] = x[i] - mx - lz;
  }
}

void softmax_lastdim(double* out, const double* in, int64_t outer, int width) {
  for (int64_t r = 0; r < outer; ++r) {
    const double* x = in + r * width;
    double* y = out + r * width;
    double mx = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < width; ++i) mx = std::max(mx, x[i]);
    double z = 0.0;
    for (int i = 0; i < width; ++i) {
      y[i] = std::exp(x[i] - mx);
      z += y[i];
    }
    double inv = 1.0 / z;
    for (int i = 0; i < width; ++i) y[i] *= inv;
  }
}

void rms_norm_rows(double* out, const double* x, const double* gain, int64_t rows, int width, double eps) {
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = x + r * width;
    double* yr = out + r * width;
    double ms = 0.0;
    for (int i = 0; i < width; ++i) ms += xr[i] * xr[i];
    ms /= static_cast<double>(width);
    double inv = 1.0 / std::sqrt(ms + eps);
    for (int i = 0; i < width; ++i) yr[i] = xr[i] * inv * gain[i];
  }
}

}  // namespace kernels

namespace {

struct MatDims {
  int m, k, n;
};

MatDims matmul_dims(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  if (a.rank() != 2 || b.rank() != 2) throw std::invalid_argument("matmul: rank-2 tensors required");
  int am = trans_a ? a.dim(1) : a.dim(0);
  int ak = trans_a ? a.dim(0) : a.dim(1);
  int bk = trans_b ? b.dim(1) : b.dim(0);
  int bn = trans_b ? b.dim(0) : b.dim(1);
  if (ak != bk) throw std::invalid_argument("matmul: inner dimensions do not agree");
  return {am, ak, bn};
}

int matmul_variant(bool trans_a, bool trans_b) {
  if (!trans_a && !trans_b) return 0;
  if (!trans_a && trans_b) return 1;
  if (trans_a && !trans_b) return 2;
  throw std::invalid_argument("matmul: double-transpose variant is not provided");
}

void lastdim_outer(const Tensor& t, int64_t* outer, int* width) {
  if (t.rank() < 1) throw std::invalid_argument("last-dim op: rank >= 1 required");
  *width = t.dim(t.rank() - 1);
  if (*width < 1) throw std::invalid_argument("last-dim op: empty last dimension");
  *outer = t.numel() / *width;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  MatDims d = matmul_dims(a, b, trans_a, trans_b);
  Tensor out = Tensor::zeros({d.m, d.n});
  kernels::matmul_acc(out.mutable_data(), a.data(), b.data(), d.m, d.k, d.n,
                      matmul_variant(trans_a, trans_b));
  return out;
}

Tensor log_softmax(const Tensor& logits) {
  int64_t outer;
  int width;
  lastdim_outer(logits, &outer, &width);
  Tensor out = Tensor::zeros(logits.shape());
  kernels::log_softmax_lastdim(out.mutable_data(), logits.data(), outer, width);
  return out;
}

Tensor softmax(const Tensor& logits) {
  int64_t outer;
  int width;
  lastdim_outer(logits, &outer, &width);
  Tensor out = Tensor::zeros(logits.shape());
  kernels::softmax_lastdim(out.mutable_data(), logits.data(), outer, width);
  return out;
}

Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps) {
  int64_t rows;
  int width;
  lastdim_outer(x, &rows, &width);
  if (gain.rank() != 1 || gain.dim(0) != width) {
    throw std::invalid_argument("rms_norm: gain must match the last dimension");
  }
  Tensor out = Tensor::zeros(x.shape());
  kernels::rms_norm_rows(out.mutable_data(), x.data(), gain.data(), rows, width, eps);
  return out;
}

ValueId Tape::push(Node node) {
  if (!node.value.all_finite()) {
    throw std::runtime_error("tape: non-finite value produced by recorded op");
  }
  nodes_.push_back(std::move(node));
  return static_cast<ValueId>(nodes_.size() - 1);
}

void Tape::check_id(ValueId id, const char* what) const {
  if (id < 0 || id >= static_cast<ValueId>(nodes_.size())) {
    throw std::invalid_argument(std::string(what) + ": unknown value slot");
  }
}

ValueId Tape::leaf(Tensor value) {
  if (!value.defined()) throw std::invalid_argument("leaf: undefined tensor");
  Node n;
  n.op = Op::kLeaf;
  n.value = std::move(value);
  return push(std::move(n));
}

ValueId Tape::matmul(ValueId a, ValueId b, bool trans_a, bool trans_b) {
  check_id(a, "matmul");
  check_id(b, "matmul");
  Node n;
  n.op = Op::kMatMul;
  n.in0 = a;
  n.in1 = b;
  n.trans_a = trans_a;
  n.trans_b = trans_b;
  n.value = steerlab::matmul(nodes_[a].value, nodes_[b].value, trans_a, trans_b);
  return push(std::move(n));
}

ValueId Tape::add(ValueId a, ValueId b) {
  check_id(a, "add");
  check_id(b, "add");
  const Tensor& ta = nodes_[a].value;
  const Tensor& tb = nodes_[b].value;
  if (!ta.same_shape(tb)) throw std::invalid_argument("add: shape mismatch");
  Tensor out = Tensor::zeros(ta.shape());
  double* o = out.mutable_data();
  const double* pa = ta.data();
  const double* pb = tb.data();
  int64_t count = ta.numel();
  for (int64_t i = 0; i < count; ++i) o[i] = pa[i] + pb[i];
  Node n;
  n.op = Op::kAdd;
  n.in0 = a;
  n.in1 = b;
  n.value = std::move(out);
  return push(std::move(n));
}

ValueId Tape::mul(ValueId a, ValueId b) {
  check_id(a, "mul");
  check_id(b, "mul");
  const Tensor& ta = nodes_[a].value;
  const Tensor& tb = nodes_[b].value;
  if (!ta.same_shape(tb)) throw std::invalid_argument("mul: shape mismatch");
  Tensor out = Tensor::zeros(ta.shape());
  double* o = out.mutable_data();
  const double* pa = ta.data();
  const double* pb = tb.data();
  int64_t count = ta.numel();
  for (int64_t i = 0; i < count; ++i) o[i] = pa[i] * pb[i];
  Node n;
  n.op = Op::kMul;
  n.in0 = a;
  n.in1 = b;
  n.value = std::move(out);
  return push(std::move(n));
}

ValueId Tape::relu(ValueId a) {
  check_id(a, "relu");
  const Tensor& ta = nodes_[a].value;
  Tensor out = Tensor::zeros(ta.shape());
  double* o = out.mutable_data();
  const double* pa = ta.data();
  int64_t count = ta.numel();
  for (int64_t i = 0; i < count; ++i) o[i] = pa[i] > 0.0 ? pa[i] : 0.0;
  Node n;
  n.op = Op::kRelu;
  n.in0 = a;
  n.value = std::move(out);
  return push(std::move(n));
}

ValueId Tape::gather_rows(ValueId table, std::vector<int> row_ids) {
  check_id(table, "gather_rows");
  const Tensor& tt = nodes_[table].value;
  if (tt.rank() != 2) throw std::invalid_argument("gather_rows: table must be rank-2");
  int rows = tt.dim(0);
  int cols = tt.dim(1);
  for (int id : row_ids) {
    if (id < 0 || id >= rows) throw std::invalid_argument("gather_rows: row id out of range");
  }
  Tensor out = Tensor::zeros({static_cast<int>(row_ids.size()), cols});
  double* o = out.mutable_data();
  const double* src = tt.data();
  for (size_t r = 0; r < row_ids.size(); ++r) {
    std::memcpy(o + r * cols, src + static_cast<size_t>(row_ids[r]) * cols,
                static_cast<size_t>(cols) * sizeof(double));
  }
  Node n;
  n.op = Op::kGatherRows;
  n.in0 = table;
  n.row_ids = std::move(row_ids);
  n.value = std::move(out);
  return push(std::move(n));
}

ValueId Tape::rms_norm(ValueId x, ValueId gain, double eps) {
  check_id(x, "rms_norm");
  check_id(gain, "rms_norm");
  Node n;
  n.op = Op::kRmsNorm;
  n.in0 = x;
  n.in1 = gain;
  n.scalar_arg = eps;
  n.value = steerlab::rms_norm(nodes_[x].value, nodes_[gain].value, eps);
  return push(std::move(n));
}

ValueId Tape::log_softmax(ValueId x) {
  check_id(x, "log_softmax");
  Node n;
  n.op = Op::kLogSoftmax;
  n.in0 = x;
  n.value = steerlab::log_softmax(nodes_[x].value);
  return push(std::move(n));
}

ValueId Tape::softmax(ValueId x) {
  check_id(x, "softmax");
  Node n;
  n.op = Op::kSoftmax;
  n.in0 = x;
  n.value = steerlab::softmax(nodes_[x].value);
  return push(std::move(n));
}

ValueId Tape::sum(ValueId x) {
  check_id(x, "sum");
  const Tensor& tx = nodes_[x].value;
  double s = 0.0;
  const double* p = tx.data();
  int64_t count = tx.numel();
  for (int64_t i = 0; i < count; ++i) s += p[i];
  Node n;
  n.op = Op::kSum;
  n.in0 = x;
  n.value = Tensor::scalar(s);
  return push(std::move(n));
}

ValueId Tape::scale(ValueId x, double factor) {
  check_id(x, "scale");
  const Tensor& tx = nodes_[x].value;
  Tensor out = Tensor::zeros(tx.shape());
  double* o = out.mutable_data();
  const double* p = tx.data();
  int64_t count = tx.numel();
  for (int64_t i = 0; i < count; ++i) o[i] = p[i] * factor;
  Node n;
  n.op = Op::kScale;
  n.in0 = x;
  n.scalar_arg = factor;
  n.value = std::move(out);
  return push(std::move(n));
}

ValueId Tape::reshape(ValueId x, std::vector<int> shape) {
  check_id(x, "reshape");
  Node n;
  n.op = Op::kReshape;
  n.in0 = x;
  n.value = nodes_[x].value.reshaped(std::move(shape));
  return push(std::move(n));
}

const Tensor& Tape::value(ValueId id) const {
  check_id(id, "value");
  return nodes_[static_cast<size_t>(id)].value;
}

Tensor Tape::compute(const Node& node, const Tensor& a, const Tensor& b) const {
  switch (node.op) {
    case Op::kLeaf:
      return node.value;
    case Op::kMatMul:
      return steerlab::matmul(a, b, node.trans_a, node.trans_b);
    case Op::kAdd: {
      Tensor out = Tensor::zeros(a.shape());
      double* o = out.mutable_data();
      for (int64_t i = 0; i < a.numel(); ++i) o[i] = a.data()[i] + b.data()[i];
      return out;
    }
    case Op::kMul: {
      Tensor out = Tensor::zeros(a.shape());
      double* o = out.mutable_data();
      for (int64_t i = 0; i < a.numel(); ++i) o[i] = a.data()[i] * b.data()[i];
      return out;
    }
    case Op::kRelu: {
      Tensor out = Tensor::zeros(a.shape());
      double* o = out.mutable_data();
      for (int64_t i = 0; i < a.numel(); ++i) o[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
      return out;
    }
    case Op::kGatherRows: {
      int cols = a.dim(1);
      Tensor out = Tensor::zeros({static_cast<int>(node.row_ids.size()), cols});
      double* o = out.mutable_data();
      for (size_t r = 0; r < node.row_ids.size(); ++r) {
        std::memcpy(o + r * cols, a.data() + static_cast<size_t>(node.row_ids[r]) * cols,
                    static_cast<size_t>(cols) * sizeof(double));
      }
      return out;
    }
    case Op::kRmsNorm:
      return steerlab::rms_norm(a, b, node.scalar_arg);
    case Op::kLogSoftmax:
      return steerlab::log_softmax(a);
    case Op::kSoftmax:
      return steerlab::softmax(a);
    case Op::kSum: {
      double s = 0.0;
      for (int64_t i = 0; i < a.numel(); ++i) s += a.data()[i];
      return Tensor::scalar(s);
    }
    case Op::kScale: {
      Tensor out = Tensor::zeros(a.shape());
      double* o = out.mutable_data();
      for (int64_t i = 0; i < a.numel(); ++i) o[i] = a.data()[i] * node.scalar_arg;
      return out;
    }
    case Op::kReshape:
      return a.reshaped(node.value.shape());
  }
  throw std::runtime_error("tape: unknown op");
}

bool Tape::replay_matches() const {
  std::vector<Tensor> recomputed(nodes_.size());
  for (size_t i = 0; i < nodes_.size(); ++i) {
    const Node& n = nodes_[i];
    if (n.op == Op::kLeaf) {
      recomputed[i] = n.value;
      continue;
    }
    const Tensor& a = recomputed[static_cast<size_t>(n.in0)];
    const Tensor& b = n.in1 >= 0 ? recomputed[static_cast<size_t>(n.in1)] : Tensor();
    recomputed[i] = compute(n, a, b);
    if (!recomputed[i].bitwise_equal(n.value)) return false;
  }
  return true;
}

void Tape::accumulate_backward(const Node& node, const Tensor& out_grad,
                               Tensor* grad_in0, Tensor* grad_in1) const {
  switch (node.op) {
    case Op::kLeaf:
      return;
    case Op::kMatMul: {
      const Tensor& a = nodes_[static_cast<size_t>(node.in0)].value;
      const Tensor& b = nodes_[static_cast<size_t>(node.in1)].value;
      int m = out_grad.dim(0);
      int n = out_grad.dim(1);
      if (!node.trans_a && !node.trans_b) {
        // dA += G * B^T ; dB += A^T * G
        int k = a.dim(1);
        kernels::matmul_acc(grad_in0->mutable_data(), out_grad.data(), b.data(), m, n, k, 1);
        kernels::matmul_acc(grad_in1->mutable_data(), a.data(), out_grad.data(), k, m, n, 2);
      } else if (!node.trans_a && node.trans_b) {
        // C = A * B^T: dA += G * B ; dB += G^T * A
        int k = a.dim(1);
        kernels::matmul_acc(grad_in0->mutable_data(), out_grad.data(), b.data(), m, n, k, 0);
        kernels::matmul_acc(grad_in1->mutable_data(), out_grad.data(), a.data(), n, m, k, 2);
      } else {
        // C = A^T * B: dA += B * G^T ; dB += A * G
        int k = a.dim(0);
        kernels::matmul_acc(grad_in0->mutable_data(), b.data(), out_grad.data(), k, n, m, 1);
        kernels::matmul_acc(grad_in1->mutable_data(), a.data(), out_grad.data(), k, m, n, 0);
      }
      return;
    }
    case Op::kAdd: {
      double* g0 = grad_in0->mutable_data();
      double* g1 = grad_in1->mutable_data();
      const double* g = out_grad.data();
      for (int64_t i = 0; i < out_grad.numel(); ++i) {
        g0[i] += g[i];
        g1[i] += g[i];
      }
      return;
    }
    case Op::kMul: {
      const Tensor& a = nodes_[static_cast<size_t>(node.in0)].value;
      const Tensor& b = nodes_[static_cast<size_t>(node.in1)].value;
      double* g0 = grad_in0->mutable_data();
      double* g1 = grad_in1->mutable_data();
      const double* g = out_grad.data();
      for (int64_t i = 0; i < out_grad.numel(); ++i) {
        g0[i] += g[i] * b.data()[i];
        g1[i] += g[i] * a.data()[i];
      }
      return;
    }
    case Op::kRelu: {
      const Tensor& a = nodes_[static_cast<size_t>(node.in0)].value;
      double* g0 = grad_in0->mutable_data();
      const double* g = out_grad.data();
      for (int64_t i = 0; i < out_grad.numel(); ++i) {
        if (a.data()[i] > 0.0) g0[i] += g[i];
      }
      return;
    }
    case Op::kGatherRows: {
      int cols = grad_in0->dim(1);
      double* g0 = grad_in0->mutable_data();
      const double* g = out_grad.data();
      for (size_t r = 0; r < node.row_ids.size(); ++r) {
        double* dst = g0 + static_cast<size_t>(node.row_ids[r]) * cols;
        const double* src = g + r * cols;
        for (int c = 0; c < cols; ++c) dst[c] += src[c];
      }
      return;
    }
    case Op::kRmsNorm: {
      const Tensor& x = nodes_[static_cast<size_t>(node.in0)].value;
      const Tensor& gain = nodes_[static_cast<size_t>(node.in1)].value;
      int width = x.dim(x.rank() - 1);
      int64_t rows = x.numel() / width;
      double eps = node.scalar_arg;
      double* gx = grad_in0->mutable_data();
      double* gg = grad_in1->mutable_data();
      const double* g = out_grad.data();
      for (int64_t r = 0; r < rows; ++r) {
        const double* xr = x.data() + r * width;
        const double* gr = g + r * width;
        double ms = 0.0;
        for (int i = 0; i < width; ++i) ms += xr[i] * xr[i];
        ms /= static_cast<double>(width);
        double inv = 1.0 / std::sqrt(ms + eps);
        double dot = 0.0;  // sum_i g_i * gain_i * x_i
        for (int i = 0; i < width; ++i) dot += gr[i] * gain.data()[i] * xr[i];
        double c = dot * inv * inv * inv / static_cast<double>(width);
        for (int i = 0; i < width; ++i) {
          gx[r * width + i] += gr[i] * gain.data()[i] * inv - xr[i] * c;
          gg[i] += gr[i] * xr[i] * inv;
        }
      }
      return;
    }
    case Op::kLogSoftmax: {
      const Tensor& y = node.value;
      int width = y.dim(y.rank() - 1);
      int64_t rows = y.numel() / width;
      double* g0 = grad_in0->mutable_data();
      const double* g = out_grad.data();
      for (int64_t r = 0; r < rows; ++r) {
        const double* yr = y.data() + r * width;
        const double* gr = g + r * width;
        double gsum = 0.0;
        for (int i = 0; i < width; ++i) gsum += gr[i];
        for (int i = 0; i < width; ++i) {
          g0[r * width + i] += gr[i] - std::exp(yr[i]) * gsum;
        }
      }
      return;
    }
    case Op::kSoftmax: {
      const Tensor& p = node.value;
      int width = p.dim(p.rank() - 1);
      int64_t rows = p.numel() / width;
      double* g0 = grad_in0->mutable_data();
      const double* g = out_grad.data();
      for (int64_t r = 0; r < rows; ++r) {
        const double* pr = p.data() + r * width;
        const double* gr = g + r * width;
        double dot = 0.0;
        for (int i = 0; i < width; ++i) dot += gr[i] * pr[i];
        for (int i = 0; i < width; ++i) {
          g0[r * width + i] += pr[i] * (gr[i] - dot);
        }
      }
      return;
    }
    case Op::kSum: {
      double g = out_grad.data()[0];
      double* g0 = grad_in0->mutable_data();
      for (int64_t i = 0; i < grad_in0->numel(); ++i) g0[i] += g;
      return;
    }
    case Op::kScale: {
      double* g0 = grad_in0->mutable_data();
      const double* g = out_grad.data();
      for (int64_t i = 0; i < out_grad.numel(); ++i) g0[i] += g[i] * node.scalar_arg;
      return;
    }
    case Op::kReshape: {
      double* g0 = grad_in0->mutable_data();
      const double* g = out_grad.data();
      for (int64_t i = 0; i < out_grad.numel(); ++i) g0[i] += g[i];
      return;
    }
  }
}

std::vector<Tensor> Tape::grad_multi(ValueId loss, const std::vector<ValueId>& targets) const {
  check_id(loss, "grad_wrt loss");
  for (ValueId t : targets) check_id(t, "grad_wrt target");
  if (nodes_[static_cast<size_t>(loss)].value.numel() != 1) {
    throw std::invalid_argument("grad_wrt: loss must be scalar");
  }

  std::vector<Tensor> adjoint(nodes_.size());
  adjoint[static_cast<size_t>(loss)] = Tensor::full(nodes_[static_cast<size_t>(loss)].value.shape(), 1.0);

  for (ValueId i = loss; i >= 0; --i) {
    const Node& n = nodes_[static_cast<size_t>(i)];
    Tensor& g = adjoint[static_cast<size_t>(i)];
    if (!g.defined() || n.op == Op::kLeaf) continue;

    Tensor* g0 = nullptr;
    Tensor* g1 = nullptr;
    if (n.in0 >= 0) {
      Tensor& slot = adjoint[static_cast<size_t>(n.in0)];
      if (!slot.defined()) slot = Tensor::zeros(nodes_[static_cast<size_t>(n.in0)].value.shape());
      g0 = &slot;
    }
    if (n.in1 >= 0) {
      Tensor& slot = adjoint[static_cast<size_t>(n.in1)];
      if (!slot.defined()) slot = Tensor::zeros(nodes_[static_cast<size_t>(n.in1)].value.shape());
      g1 = &slot;
    }
    accumulate_backward(n, g, g0, g1);
  }

  std::vector<Tensor> out;
  out.reserve(targets.size());
  for (ValueId t : targets) {
    Tensor& g = adjoint[static_cast<size_t>(t)];
    out.push_back(g.defined() ? g : Tensor::zeros(nodes_[static_cast<size_t>(t)].value.shape()));
  }
  return out;
}

Tensor Tape::grad_wrt(ValueId loss, ValueId target) const {
  return grad_multi(loss, {target})[0];
}

}  // namespace steerlab
