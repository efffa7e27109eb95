#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Core>

#include "trajeglish/random.hpp"

namespace trajeglish::nn {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic>;

/// Boolean attention mask, rows = queries, cols = keys; nonzero = may attend.
struct Mask {
  int rows = 0;
  int cols = 0;
  std::vector<std::uint8_t> allow;

  Mask() = default;
  Mask(int r, int c, bool value = false) : rows(r), cols(c), allow(static_cast<std::size_t>(r) * c, value) {}
  bool operator()(int r, int c) const { return allow[static_cast<std::size_t>(r) * cols + c] != 0; }
  void set(int r, int c, bool v) { allow[static_cast<std::size_t>(r) * cols + c] = v; }
};

struct Param {
  std::string name;
  Mat value;
  bool decay = true;  // subject to weight decay
};

/// Named parameter arrays in registration order.
class ParamStore {
 public:
  // N(0, std) init for weights; biases and gains use zeros()/ones().
  int add_normal(const std::string& name, int rows, int cols, double std, Rng& rng, bool decay = true);
  int add_constant(const std::string& name, int rows, int cols, double value);

  std::size_t size() const { return params_.size(); }
  Param& operator[](std::size_t i) { return params_[i]; }
  const Param& operator[](std::size_t i) const { return params_[i]; }
  int index(const std::string& name) const;
  bool contains(const std::string& name) const { return by_name_.count(name) != 0; }
  std::size_t count_scalars() const;

 private:
  std::vector<Param> params_;
  std::unordered_map<std::string, int> by_name_;
};

/// Per-parameter gradient buffers aligned with a ParamStore.
struct Grads {
  std::vector<Mat> g;

  explicit Grads(const ParamStore& store);
  void zero();
  void add(const Grads& other);
  void scale(double s);
  double norm() const;
};

/// Reverse-mode tape. Nodes are created in evaluation order and replayed
/// backwards by backward().
class Graph {
 public:
  using Id = int;

  explicit Graph(const ParamStore& store, Grads* grads = nullptr) : store_(store), grads_(grads) {}

  Id param(int index);
  Id param(const std::string& name) { return param(store_.index(name)); }
  Id constant(Mat value);

  Id matmul(Id a, Id b);     // a b
  Id matmul_nt(Id a, Id b);  // a b^T
  Id add(Id a, Id b);
  Id add_row(Id a, Id row);  // row broadcast over a's rows
  Id linear(Id x, Id w, Id b) { return add_row(matmul(x, w), b); }
  Id scale(Id a, double s);
  Id gelu(Id a);
  Id layer_norm(Id x, Id gain, Id bias, double eps = 1e-5);
  // Rows of `table`; negative ids produce zero rows.
  Id embed(Id table, const std::vector<int>& ids);
  Id gather_rows(Id a, const std::vector<int>& rows);
  Id concat_rows(const std::vector<Id>& parts);
  Id slice_rows(Id a, int start, int count);
  // Column-wise max over consecutive row groups [offsets[g], offsets[g+1]).
  Id max_pool_groups(Id a, const std::vector<int>& offsets);
  Id dropout(Id a, double p, Rng& rng);
  // Multi-head scaled dot-product attention core on projected q, k, v.
  // A query row with no visible key yields zeros. With `bias`, head h adds
  // bias_weights(0, h) to the score of every (query, key) pair in `bias_where`.
  Id attention(Id q, Id k, Id v, const Mask* mask, int heads, Id bias_weights = -1, const Mask* bias_where = nullptr);
  // Mean cross-entropy over rows whose target is >= 0.
  Id cross_entropy(Id logits, const std::vector<int>& targets);

  const Mat& value(Id id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  Mat& grad(Id id) { return nodes_[static_cast<std::size_t>(id)].grad; }
  std::size_t size() const { return nodes_.size(); }

  void backward(Id loss);

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool needs_grad = false;
    int param = -1;
    std::function<void(Graph&)> back;
  };

  Id push(Mat value, bool needs_grad, std::function<void(Graph&)> back = {});
  bool needs(Id id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }
  Mat& acc(Id id);  // grad buffer of a node, zero-initialized on first use

  const ParamStore& store_;
  Grads* grads_;
  std::vector<Node> nodes_;
};

}  // namespace trajeglish::nn
