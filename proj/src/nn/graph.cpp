#include "trajeglish/nn/graph.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "trajeglish/error.hpp"

namespace trajeglish::nn {

int ParamStore::add_normal(const std::string& name, int rows, int cols, double std, Rng& rng, bool decay) {
  if (contains(name)) throw std::logic_error("duplicate parameter " + name);
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal(0.0, std);
  params_.push_back({name, std::move(m), decay});
  by_name_[name] = static_cast<int>(params_.size() - 1);
  return static_cast<int>(params_.size() - 1);
}

int ParamStore::add_constant(const std::string& name, int rows, int cols, double value) {
  if (contains(name)) throw std::logic_error("duplicate parameter " + name);
  params_.push_back({name, Mat::Constant(rows, cols, value), false});
  by_name_[name] = static_cast<int>(params_.size() - 1);
  return static_cast<int>(params_.size() - 1);
}

int ParamStore::index(const std::string& name) const {
  const auto it = by_name_.find(name);
  if (it == by_name_.end()) throw std::out_of_range("no parameter named " + name);
  return it->second;
}

std::size_t ParamStore::count_scalars() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

Grads::Grads(const ParamStore& store) {
  g.reserve(store.size());
  for (std::size_t i = 0; i < store.size(); ++i) g.push_back(Mat::Zero(store[i].value.rows(), store[i].value.cols()));
}

void Grads::zero() {
  for (auto& m : g) m.setZero();
}

void Grads::add(const Grads& other) {
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += other.g[i];
}

void Grads::scale(double s) {
  for (auto& m : g) m *= s;
}

double Grads::norm() const {
  double s = 0.0;
  for (const auto& m : g) s += m.squaredNorm();
  return std::sqrt(s);
}

Graph::Id Graph::push(Mat value, bool needs_grad, std::function<void(Graph&)> back) {
  nodes_.push_back({std::move(value), Mat(), needs_grad, -1, std::move(back)});
  return static_cast<Id>(nodes_.size() - 1);
}

Mat& Graph::acc(Id id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

Graph::Id Graph::param(int index) {
  const Id id = push(store_[static_cast<std::size_t>(index)].value, grads_ != nullptr);
  nodes_.back().param = index;
  return id;
}

Graph::Id Graph::constant(Mat value) { return push(std::move(value), false); }

Graph::Id Graph::matmul(Id a, Id b) {
  if (value(a).cols() != value(b).rows()) throw std::invalid_argument("matmul: shape mismatch");
  Mat out = value(a) * value(b);
  const bool ng = needs(a) || needs(b);
  const Id self = static_cast<Id>(nodes_.size());
  return push(std::move(out), ng, [=](Graph& g) {
    const Mat& d = g.grad(self);
    if (g.needs(a)) g.acc(a).noalias() += d * g.value(b).transpose();
    if (g.needs(b)) g.acc(b).noalias() += g.value(a).transpose() * d;
  });
}

Graph::Id Graph::matmul_nt(Id a, Id b) {
  if (value(a).cols() != value(b).cols()) throw std::invalid_argument("matmul_nt: shape mismatch");
  Mat out = value(a) * value(b).transpose();
  const bool ng = needs(a) || needs(b);
  const Id self = static_cast<Id>(nodes_.size());
  return push(std::move(out), ng, [=](Graph& g) {
    const Mat& d = g.grad(self);
    if (g.needs(a)) g.acc(a).noalias() += d * g.value(b);
    if (g.needs(b)) g.acc(b).noalias() += d.transpose() * g.value(a);
  });
}

Graph::Id Graph::add(Id a, Id b) {
  if (value(a).rows() != value(b).rows() || value(a).cols() != value(b).cols()) {
    throw std::invalid_argument("add: shape mismatch");
  }
  Mat out = value(a) + value(b);
  const Id self = static_cast<Id>(nodes_.size());
  return push(std::move(out), needs(a) || needs(b), [=](Graph& g) {
    const Mat& d = g.grad(self);
    if (g.needs(a)) g.acc(a) += d;
    if (g.needs(b)) g.acc(b) += d;
  });
}

Graph::Id Graph::add_row(Id a, Id row) {
  if (value(row).rows() != 1 || value(row).cols() != value(a).cols()) {
    throw std::invalid_argument("add_row: shape mismatch");
  }
  Mat out = value(a).rowwise() + value(row).row(0);
  const Id self = static_cast<Id>(nodes_.size());
  return push(std::move(out), needs(a) || needs(row), [=](Graph& g) {
    const Mat& d = g.grad(self);
    if (g.needs(a)) g.acc(a) += d;
    if (g.needs(row)) g.acc(row) += d.colwise().sum();
  });
}

Graph::Id Graph::scale(Id a, double s) {
  Mat out = value(a) * s;
  const Id self = static_cast<Id>(nodes_.size());
  return push(std::move(out), needs(a), [=](Graph& g) { g.acc(a) += g.grad(self) * s; });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
}

Graph::Id Graph::gelu(Id a) {
  const Mat& x = value(a);
  Mat out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double v = x.data()[i];
    out.data()[i] = 0.5 * v * (1.0 + std::tanh(kGeluC * (v + 0.044715 * v * v * v)));
  }
  const Id self = static_cast<Id>(nodes_.size());
  return push(std::move(out), needs(a), [=](Graph& g) {
    const Mat& xin = g.value(a);
    const Mat& d = g.grad(self);
    Mat& da = g.acc(a);
    for (Eigen::Index i = 0; i < xin.size(); ++i) {
      const double v = xin.data()[i];
      const double u = kGeluC * (v + 0.044715 * v * v * v);
      const double t = std::tanh(u);
      const double du = kGeluC * (1.0 + 3.0 * 0.044715 * v * v);
      da.data()[i] += d.data()[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
    }
  });
}

Graph::Id Graph::layer_norm(Id x, Id gain, Id bias, double eps) {
  const Mat& in = value(x);
  const Eigen::Index n = in.rows(), c = in.cols();
  auto xhat = std::make_shared<Mat>(n, c);
  auto rstd = std::make_shared<Eigen::VectorXd>(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const double mean = in.row(r).mean();
    const double var = (in.row(r).array() - mean).square().mean();
    (*rstd)(r) = 1.0 / std::sqrt(var + eps);
    xhat->row(r) = (in.row(r).array() - mean) * (*rstd)(r);
  }
  Mat out = (xhat->array().rowwise() * value(gain).row(0).array()).rowwise() + value(bias).row(0).array();
  const Id self = static_cast<Id>(nodes_.size());
  return push(std::move(out), needs(x) || needs(gain) || needs(bias), [=](Graph& g) {
    const Mat& d = g.grad(self);
    if (g.needs(gain)) g.acc(gain) += (d.array() * xhat->array()).colwise().sum().matrix();
    if (g.needs(bias)) g.acc(bias) += d.colwise().sum();
    if (g.needs(x)) {
      Mat& dx = g.acc(x);
      const auto gm = g.value(gain).row(0).array();
      for (Eigen::Index r = 0; r < n; ++r) {
        const Eigen::Array<double, 1, Eigen::Dynamic> dxh = d.row(r).array() * gm;
        const double m1 = dxh.mean();
        const double m2 = (dxh * xhat->row(r).array()).mean();
        dx.row(r).array() += (*rstd)(r) * (dxh - m1 - xhat->row(r).array() * m2);
      }
    }
  });
}

Graph::Id Graph::embed(Id table, const std::vector<int>& ids) {
  const Mat& t = value(table);
  Mat out = Mat::Zero(static_cast<Eigen::Index>(ids.size()), t.cols());
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0) continue;
    if (ids[r] >= t.rows()) throw std::out_of_range("embed: id out of range");
    out.row(static_cast<Eigen::Index>(r)) = t.row(ids[r]);
  }
  const Id self = static_cast<Id>(nodes_.size());
  return push(std::move(out), needs(table), [=](Graph& g) {
    const Mat& d = g.grad(self);
    Mat& dt = g.acc(table);
    for (std::size_t r = 0; r < ids.size(); ++r) {
      if (ids[r] >= 0) dt.row(ids[r]) += d.row(static_cast<Eigen::Index>(r));
    }
  });
}

Graph::Id Graph::gather_rows(Id a, const std::vector<int>& rows) {
  const Mat& src = value(a);
  Mat out(static_cast<Eigen::Index>(rows.size()), src.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] < 0 || rows[r] >= src.rows()) throw std::out_of_range("gather_rows: row out of range");
    out.row(static_cast<Eigen::Index>(r)) = src.row(rows[r]);
  }
  const Id self = static_cast<Id>(nodes_.size());
  return push(std::move(out), needs(a), [=](Graph& g) {
    const Mat& d = g.grad(self);
    Mat& da = g.acc(a);
    for (std::size_t r = 0; r < rows.size(); ++r) da.row(rows[r]) += d.row(static_cast<Eigen::Index>(r));
  });
}

Graph::Id Graph::concat_rows(const std::vector<Id>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
  Eigen::Index rows = 0;
  const Eigen::Index cols = value(parts[0]).cols();
  bool ng = false;
  for (Id p : parts) {
    if (value(p).cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
    rows += value(p).rows();
    ng = ng || needs(p);
  }
  Mat out(rows, cols);
  Eigen::Index at = 0;
  for (Id p : parts) {
    out.middleRows(at, value(p).rows()) = value(p);
    at += value(p).rows();
  }
  const Id self = static_cast<Id>(nodes_.size());
  return push(std::move(out), ng, [=](Graph& g) {
    const Mat& d = g.grad(self);
    Eigen::Index off = 0;
    for (Id p : parts) {
      const Eigen::Index r = g.value(p).rows();
      if (g.needs(p)) g.acc(p) += d.middleRows(off, r);
      off += r;
    }
  });
}

Graph::Id Graph::slice_rows(Id a, int start, int count) {
  if (start < 0 || count < 0 || start + count > value(a).rows()) throw std::out_of_range("slice_rows: bad range");
  Mat out = value(a).middleRows(start, count);
  const Id self = static_cast<Id>(nodes_.size());
  return push(std::move(out), needs(a), [=](Graph& g) { g.acc(a).middleRows(start, count) += g.grad(self); });
}

Graph::Id Graph::max_pool_groups(Id a, const std::vector<int>& offsets) {
  const Mat& x = value(a);
  const auto groups = static_cast<Eigen::Index>(offsets.size()) - 1;
  Mat out = Mat::Zero(groups, x.cols());
  auto arg = std::make_shared<std::vector<int>>(static_cast<std::size_t>(groups * x.cols()), -1);
  for (Eigen::Index gidx = 0; gidx < groups; ++gidx) {
    const int lo = offsets[gidx], hi = offsets[gidx + 1];
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      if (hi <= lo) continue;
      int best = lo;
      for (int r = lo + 1; r < hi; ++r) {
        if (x(r, c) > x(best, c)) best = r;
      }
      out(gidx, c) = x(best, c);
      (*arg)[static_cast<std::size_t>(gidx * x.cols() + c)] = best;
    }
  }
  const Id self = static_cast<Id>(nodes_.size());
  const Eigen::Index cols = x.cols();
  return push(std::move(out), needs(a), [=](Graph& g) {
    const Mat& d = g.grad(self);
    Mat& da = g.acc(a);
    for (Eigen::Index gidx = 0; gidx < groups; ++gidx) {
      for (Eigen::Index c = 0; c < cols; ++c) {
        const int r = (*arg)[static_cast<std::size_t>(gidx * cols + c)];
        if (r >= 0) da(r, c) += d(gidx, c);
      }
    }
  });
}

Graph::Id Graph::dropout(Id a, double p, Rng& rng) {
  if (p <= 0.0) return a;
  auto keep = std::make_shared<Mat>(value(a).rows(), value(a).cols());
  const double s = 1.0 / (1.0 - p);
  for (Eigen::Index i = 0; i < keep->size(); ++i) keep->data()[i] = rng.uniform() < p ? 0.0 : s;
  Mat out = value(a).cwiseProduct(*keep);
  const Id self = static_cast<Id>(nodes_.size());
  return push(std::move(out), needs(a), [=](Graph& g) { g.acc(a) += g.grad(self).cwiseProduct(*keep); });
}

Graph::Id Graph::attention(Id q, Id k, Id v, const Mask* mask, int heads, Id bias_weights, const Mask* bias_where) {
  const Mat& Q = value(q);
  const Mat& K = value(k);
  const Mat& V = value(v);
  const Eigen::Index n = Q.rows(), m = K.rows(), c = Q.cols();
  if (K.cols() != c || V.cols() != c || V.rows() != m || c % heads != 0) {
    throw std::invalid_argument("attention: shape mismatch");
  }
  if (mask && (mask->rows != n || mask->cols != m)) throw std::invalid_argument("attention: mask shape mismatch");
  const bool biased = bias_weights >= 0;
  if (biased && (!bias_where || bias_where->rows != n || bias_where->cols != m || value(bias_weights).rows() != 1 ||
                 value(bias_weights).cols() != heads)) {
    throw std::invalid_argument("attention: bias shape mismatch");
  }
  const Eigen::Index d = c / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(d));
  auto probs = std::make_shared<std::vector<Mat>>(static_cast<std::size_t>(heads));
  Mat out = Mat::Zero(n, c);
  for (int h = 0; h < heads; ++h) {
    Mat s = (Q.middleCols(h * d, d) * K.middleCols(h * d, d).transpose()) * inv;
    if (biased) {
      const double b = value(bias_weights)(0, h);
      for (Eigen::Index r = 0; r < n; ++r) {
        for (Eigen::Index j = 0; j < m; ++j) {
          if ((*bias_where)(static_cast<int>(r), static_cast<int>(j))) s(r, j) += b;
        }
      }
    }
    for (Eigen::Index r = 0; r < n; ++r) {
      double mx = -std::numeric_limits<double>::infinity();
      for (Eigen::Index j = 0; j < m; ++j) {
        if (mask && !(*mask)(static_cast<int>(r), static_cast<int>(j))) {
          s(r, j) = -std::numeric_limits<double>::infinity();
        } else {
          mx = std::max(mx, s(r, j));
        }
      }
      if (mx == -std::numeric_limits<double>::infinity()) {
        s.row(r).setZero();
        continue;
      }
      double z = 0.0;
      for (Eigen::Index j = 0; j < m; ++j) {
        const double e = s(r, j) == -std::numeric_limits<double>::infinity() ? 0.0 : std::exp(s(r, j) - mx);
        s(r, j) = e;
        z += e;
      }
      s.row(r) /= z;
    }
    out.middleCols(h * d, d).noalias() = s * V.middleCols(h * d, d);
    (*probs)[static_cast<std::size_t>(h)] = std::move(s);
  }
  const Id self = static_cast<Id>(nodes_.size());
  const bool bias_grad = biased && needs(bias_weights);
  // The caller's mask may not outlive the forward pass.
  const auto where = bias_grad ? std::make_shared<const Mask>(*bias_where) : nullptr;
  return push(std::move(out), needs(q) || needs(k) || needs(v) || bias_grad, [=](Graph& g) {
    const Mat& dO = g.grad(self);
    const Mat& Qv = g.value(q);
    const Mat& Kv = g.value(k);
    const Mat& Vv = g.value(v);
    for (int h = 0; h < heads; ++h) {
      const Mat& P = (*probs)[static_cast<std::size_t>(h)];
      const auto dOh = dO.middleCols(h * d, d);
      if (g.needs(v)) g.acc(v).middleCols(h * d, d).noalias() += P.transpose() * dOh;
      if (!g.needs(q) && !g.needs(k) && !bias_grad) continue;
      Mat dP = dOh * Vv.middleCols(h * d, d).transpose();
      const Eigen::VectorXd rs = (dP.array() * P.array()).rowwise().sum();
      Mat dS = (P.array() * (dP.colwise() - rs).array()).matrix();
      if (bias_grad) {
        double db = 0.0;
        for (Eigen::Index r = 0; r < dS.rows(); ++r) {
          for (Eigen::Index j = 0; j < dS.cols(); ++j) {
            if ((*where)(static_cast<int>(r), static_cast<int>(j))) db += dS(r, j);
          }
        }
        g.acc(bias_weights)(0, h) += db;
      }
      dS *= inv;
      if (g.needs(q)) g.acc(q).middleCols(h * d, d).noalias() += dS * Kv.middleCols(h * d, d);
      if (g.needs(k)) g.acc(k).middleCols(h * d, d).noalias() += dS.transpose() * Qv.middleCols(h * d, d);
    }
  });
}

Graph::Id Graph::cross_entropy(Id logits, const std::vector<int>& targets) {
  const Mat& z = value(logits);
  if (static_cast<Eigen::Index>(targets.size()) != z.rows()) throw std::invalid_argument("cross_entropy: size mismatch");
  std::size_t count = 0;
  for (int t : targets) {
    if (t >= z.cols()) throw std::out_of_range("cross_entropy: target out of range");
    count += t >= 0;
  }
  if (count == 0) throw DataError("cross_entropy: no valid target positions");
  auto soft = std::make_shared<Mat>(z.rows(), z.cols());
  double loss = 0.0;
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    const double mx = z.row(r).maxCoeff();
    soft->row(r) = (z.row(r).array() - mx).exp();
    const double sum = soft->row(r).sum();
    soft->row(r) /= sum;
    const int t = targets[static_cast<std::size_t>(r)];
    if (t >= 0) loss += std::log(sum) + mx - z(r, t);
  }
  Mat out(1, 1);
  out(0, 0) = loss / static_cast<double>(count);
  const Id self = static_cast<Id>(nodes_.size());
  return push(std::move(out), needs(logits), [=](Graph& g) {
    const double d = g.grad(self)(0, 0) / static_cast<double>(count);
    Mat& dz = g.acc(logits);
    for (Eigen::Index r = 0; r < dz.rows(); ++r) {
      const int t = targets[static_cast<std::size_t>(r)];
      if (t < 0) continue;
      dz.row(r) += soft->row(r) * d;
      dz(r, t) -= d;
    }
  });
}

void Graph::backward(Id loss) {
  if (value(loss).size() != 1) throw std::invalid_argument("backward: loss must be scalar");
  acc(loss)(0, 0) += 1.0;
  for (Id i = loss; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.needs_grad || n.grad.size() == 0) continue;
    if (n.back) n.back(*this);
    if (n.param >= 0 && grads_) grads_->g[static_cast<std::size_t>(n.param)] += n.grad;
  }
}

}  // namespace trajeglish::nn
