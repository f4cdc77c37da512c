#include "empower/tensor.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>

#include "empower/errors.hpp"

namespace empower {

namespace {

constexpr double neg_inf = -std::numeric_limits<double>::infinity();

std::string shape(const Matrix& m) { return std::to_string(m.rows()) + "x" + std::to_string(m.cols()); }

void require(bool ok, const char* op, const std::string& what) {
  if (!ok) {
    throw std::invalid_argument(std::string(op) + ": " + what);
  }
}

}  // namespace

ParamBlock::ParamBlock(std::string name_, Eigen::Index rows, Eigen::Index cols)
    : name(std::move(name_)),
      values(Matrix::Zero(rows, cols)),
      grad(Matrix::Zero(rows, cols)),
      adam_m(Matrix::Zero(rows, cols)),
      adam_v(Matrix::Zero(rows, cols)) {}

void adam_step(ParamBlock& block, const AdamConfig& cfg) {
  if (!block.grad.allFinite()) {
    throw NumericError("non-finite gradient in parameter block '" + block.name + "'");
  }
  ++block.step_count;
  const double t = static_cast<double>(block.step_count);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  block.adam_m = cfg.beta1 * block.adam_m + (1.0 - cfg.beta1) * block.grad;
  block.adam_v = cfg.beta2 * block.adam_v + (1.0 - cfg.beta2) * block.grad.cwiseProduct(block.grad);
  block.values.array() -= cfg.lr * (block.adam_m.array() / c1) / ((block.adam_v.array() / c2).sqrt() + cfg.eps);
  block.grad.setZero();
}

void gaussian_init(ParamBlock& block, Rng& rng, double std) {
  if (!(std > 0.0)) {
    throw std::invalid_argument("gaussian_init: std must be positive");
  }
  for (Eigen::Index i = 0; i < block.values.size(); ++i) {
    block.values.data()[i] = std * rng.normal();
  }
}

const char* op_name(Graph::Op op) {
  switch (op) {
    case Graph::Op::input: return "input";
    case Graph::Op::param: return "param";
    case Graph::Op::matmul: return "matmul";
    case Graph::Op::add: return "add";
    case Graph::Op::add_row: return "add_row";
    case Graph::Op::mul: return "mul";
    case Graph::Op::scale: return "scale";
    case Graph::Op::tanh: return "tanh";
    case Graph::Op::sigmoid: return "sigmoid";
    case Graph::Op::exp: return "exp";
    case Graph::Op::log: return "log";
    case Graph::Op::log_softmax: return "log_softmax";
    case Graph::Op::logsumexp: return "logsumexp";
    case Graph::Op::gather_rows: return "gather_rows";
    case Graph::Op::pick: return "pick";
    case Graph::Op::concat_cols: return "concat_cols";
    case Graph::Op::slice_cols: return "slice_cols";
    case Graph::Op::slice_rows: return "slice_rows";
    case Graph::Op::entropy: return "entropy";
    case Graph::Op::gmm_logpdf: return "gmm_logpdf";
    case Graph::Op::weighted_sum: return "weighted_sum";
    case Graph::Op::sum: return "sum";
  }
  return "?";
}

const Matrix& Graph::val(int id) const {
  const Node& n = nodes_[static_cast<std::size_t>(id)];
  return n.param ? n.param->values : n.value;
}

const Matrix& Graph::value(Var v) const {
  if (v.id < 0 || v.id >= size()) {
    throw std::out_of_range("graph: bad node id " + std::to_string(v.id));
  }
  return val(v.id);
}

double Graph::scalar(Var v) const {
  const Matrix& m = value(v);
  if (m.size() != 1) {
    throw std::invalid_argument("graph: node " + std::to_string(v.id) + " is " + shape(m) + ", not a scalar");
  }
  return m(0, 0);
}

Matrix& Graph::grad_of(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.param) {
    return n.param->grad;
  }
  if (n.grad.size() == 0) {
    n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  }
  return n.grad;
}

void Graph::check_finite(int id) const {
  const Node& n = nodes_[static_cast<std::size_t>(id)];
  const Matrix& v = val(id);
  bool ok = true;
  if (n.op == Op::log_softmax) {
    // masked entries are -inf by construction
    for (Eigen::Index i = 0; i < v.size() && ok; ++i) {
      const double x = v.data()[i];
      ok = !std::isnan(x) && x != std::numeric_limits<double>::infinity();
    }
  } else {
    ok = v.allFinite();
  }
  if (!ok) {
    throw NumericError("non-finite value at node " + std::to_string(id) + " (" + op_name(n.op) + ")");
  }
}

Var Graph::push(Node node) {
  if (consumed_) {
    throw std::logic_error("graph: cannot extend a graph after backward");
  }
  nodes_.push_back(std::move(node));
  const int id = size() - 1;
  check_finite(id);
  return Var{id};
}

Var Graph::input(Matrix value) {
  Node n{Op::input};
  n.value = std::move(value);
  return push(std::move(n));
}

Var Graph::param(ParamBlock& block) {
  for (const auto& [p, id] : param_nodes_) {
    if (p == &block) {
      return Var{id};
    }
  }
  if (block.grad.rows() != block.values.rows() || block.grad.cols() != block.values.cols()) {
    throw std::invalid_argument("graph: parameter block '" + block.name + "' has inconsistent shapes");
  }
  Node n{Op::param};
  n.param = &block;
  const Var v = push(std::move(n));
  param_nodes_.emplace_back(&block, v.id);
  return v;
}

Var Graph::matmul(Var a, Var b) {
  const Matrix& x = value(a);
  const Matrix& y = value(b);
  require(x.cols() == y.rows(), "matmul", shape(x) + " * " + shape(y));
  Node n{Op::matmul, a.id, b.id};
  n.value.noalias() = x * y;
  return push(std::move(n));
}

Var Graph::add(Var a, Var b) {
  const Matrix& x = value(a);
  const Matrix& y = value(b);
  require(x.rows() == y.rows() && x.cols() == y.cols(), "add", shape(x) + " + " + shape(y));
  Node n{Op::add, a.id, b.id};
  n.value = x + y;
  return push(std::move(n));
}

Var Graph::add_row(Var a, Var row) {
  const Matrix& x = value(a);
  const Matrix& r = value(row);
  require(r.rows() == 1 && r.cols() == x.cols(), "add_row", shape(x) + " + row " + shape(r));
  Node n{Op::add_row, a.id, row.id};
  n.value = x.rowwise() + r.row(0);
  return push(std::move(n));
}

Var Graph::mul(Var a, Var b) {
  const Matrix& x = value(a);
  const Matrix& y = value(b);
  require(x.rows() == y.rows() && x.cols() == y.cols(), "mul", shape(x) + " .* " + shape(y));
  Node n{Op::mul, a.id, b.id};
  n.value = x.cwiseProduct(y);
  return push(std::move(n));
}

Var Graph::scale(Var a, double c) {
  Node n{Op::scale, a.id};
  n.value = c * value(a);
  n.scalar = c;
  return push(std::move(n));
}

Var Graph::tanh(Var a) {
  Node n{Op::tanh, a.id};
  n.value = value(a).array().tanh().matrix();
  return push(std::move(n));
}

Var Graph::sigmoid(Var a) {
  Node n{Op::sigmoid, a.id};
  n.value = (1.0 / (1.0 + (-value(a).array()).exp())).matrix();
  return push(std::move(n));
}

Var Graph::exp(Var a) {
  Node n{Op::exp, a.id};
  n.value = value(a).array().exp().matrix();
  return push(std::move(n));
}

Var Graph::log(Var a) {
  Node n{Op::log, a.id};
  n.value = value(a).array().log().matrix();
  return push(std::move(n));
}

Var Graph::log_softmax(Var a, const Matrix& mask) {
  const Matrix& x = value(a);
  const bool masked = mask.size() != 0;
  require(!masked || (mask.rows() == x.rows() && mask.cols() == x.cols()), "log_softmax",
          "mask " + shape(mask) + " vs " + shape(x));
  Node n{Op::log_softmax, a.id};
  n.value.resize(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    double mx = neg_inf;
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      if (!masked || mask(r, c) != 0.0) mx = std::max(mx, x(r, c));
    }
    require(mx != neg_inf, "log_softmax", "row " + std::to_string(r) + " has no allowed entry");
    double s = 0.0;
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      if (!masked || mask(r, c) != 0.0) s += std::exp(x(r, c) - mx);
    }
    const double lse = mx + std::log(s);
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      n.value(r, c) = (!masked || mask(r, c) != 0.0) ? x(r, c) - lse : neg_inf;
    }
  }
  return push(std::move(n));
}

Var Graph::logsumexp(Var a) {
  const Matrix& x = value(a);
  require(x.cols() > 0, "logsumexp", "empty rows");
  Node n{Op::logsumexp, a.id};
  n.value.resize(x.rows(), 1);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mx = x.row(r).maxCoeff();
    n.value(r, 0) = mx + std::log((x.row(r).array() - mx).exp().sum());
  }
  return push(std::move(n));
}

Var Graph::gather_rows(Var table, const std::vector<int>& rows) {
  const Matrix& t = value(table);
  Node n{Op::gather_rows, table.id};
  n.value.resize(static_cast<Eigen::Index>(rows.size()), t.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] >= 0 && rows[i] < t.rows(), "gather_rows", "row index " + std::to_string(rows[i]) + " of " + shape(t));
    n.value.row(static_cast<Eigen::Index>(i)) = t.row(rows[i]);
  }
  n.indices = rows;
  return push(std::move(n));
}

Var Graph::pick(Var a, const std::vector<int>& cols) {
  const Matrix& x = value(a);
  require(static_cast<Eigen::Index>(cols.size()) == x.rows(), "pick", "index count vs " + shape(x));
  Node n{Op::pick, a.id};
  n.value.resize(x.rows(), 1);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const int c = cols[static_cast<std::size_t>(r)];
    require(c >= 0 && c < x.cols(), "pick", "column index " + std::to_string(c) + " of " + shape(x));
    n.value(r, 0) = x(r, c);
  }
  n.indices = cols;
  return push(std::move(n));
}

Var Graph::concat_cols(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_cols", "no inputs");
  const Eigen::Index rows = value(parts[0]).rows();
  Eigen::Index cols = 0;
  for (auto p : parts) {
    require(value(p).rows() == rows, "concat_cols", "row count mismatch");
    cols += value(p).cols();
  }
  Node n{Op::concat_cols};
  n.value.resize(rows, cols);
  Eigen::Index at = 0;
  for (auto p : parts) {
    const Matrix& x = value(p);
    n.value.middleCols(at, x.cols()) = x;
    at += x.cols();
    n.inputs.push_back(p.id);
  }
  return push(std::move(n));
}

Var Graph::slice_cols(Var a, Eigen::Index begin, Eigen::Index count) {
  const Matrix& x = value(a);
  require(begin >= 0 && count >= 0 && begin + count <= x.cols(), "slice_cols", "range out of " + shape(x));
  Node n{Op::slice_cols, a.id};
  n.value = x.middleCols(begin, count);
  n.begin = begin;
  return push(std::move(n));
}

Var Graph::slice_rows(Var a, Eigen::Index begin, Eigen::Index count) {
  const Matrix& x = value(a);
  require(begin >= 0 && count >= 0 && begin + count <= x.rows(), "slice_rows", "range out of " + shape(x));
  Node n{Op::slice_rows, a.id};
  n.value = x.middleRows(begin, count);
  n.begin = begin;
  return push(std::move(n));
}

Var Graph::entropy(Var log_probs) {
  const Matrix& x = value(log_probs);
  Node n{Op::entropy, log_probs.id};
  n.value = Matrix::Zero(x.rows(), 1);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    double h = 0.0;
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      if (x(r, c) != neg_inf) h -= std::exp(x(r, c)) * x(r, c);
    }
    n.value(r, 0) = h;
  }
  return push(std::move(n));
}

Var Graph::gmm_logpdf(Var logits, Var means, const Matrix& points, int dim, double sigma) {
  const Matrix& w = value(logits);
  const Matrix& mu = value(means);
  require(sigma > 0.0, "gmm_logpdf", "sigma must be positive");
  require(dim > 0 && mu.cols() == w.cols() * dim, "gmm_logpdf", "means " + shape(mu) + " for logits " + shape(w));
  require(mu.rows() == w.rows() && points.rows() == w.rows() && points.cols() % dim == 0, "gmm_logpdf",
          "points " + shape(points));
  const Eigen::Index k = w.cols();
  const Eigen::Index m = points.cols() / dim;
  const double inv_var = 1.0 / (sigma * sigma);
  const double log_norm = -0.5 * dim * std::log(2.0 * std::numbers::pi * sigma * sigma);
  Node n{Op::gmm_logpdf, logits.id, means.id};
  n.value.resize(w.rows(), m);
  std::vector<double> terms(static_cast<std::size_t>(k));
  for (Eigen::Index r = 0; r < w.rows(); ++r) {
    const double wmax = w.row(r).maxCoeff();
    const double wlse = wmax + std::log((w.row(r).array() - wmax).exp().sum());
    for (Eigen::Index j = 0; j < m; ++j) {
      double best = neg_inf;
      for (Eigen::Index i = 0; i < k; ++i) {
        double d2 = 0.0;
        for (int d = 0; d < dim; ++d) {
          const double diff = points(r, j * dim + d) - mu(r, i * dim + d);
          d2 += diff * diff;
        }
        terms[static_cast<std::size_t>(i)] = w(r, i) - wlse - 0.5 * d2 * inv_var;
        best = std::max(best, terms[static_cast<std::size_t>(i)]);
      }
      double s = 0.0;
      for (double t : terms) s += std::exp(t - best);
      n.value(r, j) = log_norm + best + std::log(s);
    }
  }
  n.aux = points;
  n.dim = dim;
  n.scalar = sigma;
  return push(std::move(n));
}

Var Graph::weighted_sum(Var a, const Matrix& weights) {
  const Matrix& x = value(a);
  require(weights.rows() == x.rows() && weights.cols() == x.cols(), "weighted_sum",
          "weights " + shape(weights) + " vs " + shape(x));
  Node n{Op::weighted_sum, a.id};
  double s = 0.0;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    if (weights.data()[i] != 0.0) s += weights.data()[i] * x.data()[i];
  }
  n.value = Matrix::Constant(1, 1, s);
  n.aux = weights;
  return push(std::move(n));
}

Var Graph::sum(Var a) {
  Node n{Op::sum, a.id};
  n.value = Matrix::Constant(1, 1, value(a).sum());
  return push(std::move(n));
}

void Graph::backward(Var loss) {
  if (consumed_) {
    throw std::logic_error("graph: backward already run");
  }
  const Matrix& l = value(loss);
  if (l.size() != 1) {
    throw std::invalid_argument("graph: loss must be scalar, got " + shape(l));
  }
  consumed_ = true;
  Node& root = nodes_[static_cast<std::size_t>(loss.id)];
  if (root.param) {
    root.param->grad(0, 0) += 1.0;
    return;
  }
  grad_of(loss.id)(0, 0) = 1.0;
  for (int id = loss.id; id >= 0; --id) {
    backward_node(id);
  }
}

void Graph::backward_node(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.op == Op::input || n.op == Op::param || n.grad.size() == 0) {
    return;
  }
  const Matrix& g = n.grad;
  const Matrix& y = n.value;
  switch (n.op) {
    case Op::input:
    case Op::param:
      break;
    case Op::matmul:
      grad_of(n.a).noalias() += g * val(n.b).transpose();
      grad_of(n.b).noalias() += val(n.a).transpose() * g;
      break;
    case Op::add:
      grad_of(n.a) += g;
      grad_of(n.b) += g;
      break;
    case Op::add_row:
      grad_of(n.a) += g;
      grad_of(n.b) += g.colwise().sum();
      break;
    case Op::mul:
      grad_of(n.a) += g.cwiseProduct(val(n.b));
      grad_of(n.b) += g.cwiseProduct(val(n.a));
      break;
    case Op::scale:
      grad_of(n.a) += n.scalar * g;
      break;
    case Op::tanh:
      grad_of(n.a).array() += g.array() * (1.0 - y.array().square());
      break;
    case Op::sigmoid:
      grad_of(n.a).array() += g.array() * y.array() * (1.0 - y.array());
      break;
    case Op::exp:
      grad_of(n.a).array() += g.array() * y.array();
      break;
    case Op::log:
      grad_of(n.a).array() += g.array() / val(n.a).array();
      break;
    case Op::log_softmax: {
      Matrix& ga = grad_of(n.a);
      for (Eigen::Index r = 0; r < y.rows(); ++r) {
        double gs = 0.0;
        for (Eigen::Index c = 0; c < y.cols(); ++c) {
          if (y(r, c) != neg_inf) gs += g(r, c);
        }
        for (Eigen::Index c = 0; c < y.cols(); ++c) {
          if (y(r, c) != neg_inf) ga(r, c) += g(r, c) - std::exp(y(r, c)) * gs;
        }
      }
      break;
    }
    case Op::logsumexp: {
      Matrix& ga = grad_of(n.a);
      const Matrix& x = val(n.a);
      for (Eigen::Index r = 0; r < x.rows(); ++r) {
        ga.row(r).array() += g(r, 0) * (x.row(r).array() - y(r, 0)).exp();
      }
      break;
    }
    case Op::gather_rows: {
      Matrix& ga = grad_of(n.a);
      for (std::size_t i = 0; i < n.indices.size(); ++i) {
        ga.row(n.indices[i]) += g.row(static_cast<Eigen::Index>(i));
      }
      break;
    }
    case Op::pick: {
      Matrix& ga = grad_of(n.a);
      for (std::size_t r = 0; r < n.indices.size(); ++r) {
        ga(static_cast<Eigen::Index>(r), n.indices[r]) += g(static_cast<Eigen::Index>(r), 0);
      }
      break;
    }
    case Op::concat_cols: {
      Eigen::Index at = 0;
      for (int in : n.inputs) {
        const Eigen::Index c = val(in).cols();
        grad_of(in) += g.middleCols(at, c);
        at += c;
      }
      break;
    }
    case Op::slice_cols:
      grad_of(n.a).middleCols(n.begin, g.cols()) += g;
      break;
    case Op::slice_rows:
      grad_of(n.a).middleRows(n.begin, g.rows()) += g;
      break;
    case Op::entropy: {
      Matrix& ga = grad_of(n.a);
      const Matrix& x = val(n.a);
      for (Eigen::Index r = 0; r < x.rows(); ++r) {
        for (Eigen::Index c = 0; c < x.cols(); ++c) {
          if (x(r, c) != neg_inf) ga(r, c) -= g(r, 0) * std::exp(x(r, c)) * (x(r, c) + 1.0);
        }
      }
      break;
    }
    case Op::gmm_logpdf: {
      const Matrix& w = val(n.a);
      const Matrix& mu = val(n.b);
      Matrix& gw = grad_of(n.a);
      Matrix& gmu = grad_of(n.b);
      const int dim = n.dim;
      const Eigen::Index k = w.cols();
      const Eigen::Index m = y.cols();
      const double inv_var = 1.0 / (n.scalar * n.scalar);
      const double log_norm = -0.5 * dim * std::log(2.0 * std::numbers::pi * n.scalar * n.scalar);
      for (Eigen::Index r = 0; r < w.rows(); ++r) {
        const double wmax = w.row(r).maxCoeff();
        const double wlse = wmax + std::log((w.row(r).array() - wmax).exp().sum());
        for (Eigen::Index j = 0; j < m; ++j) {
          const double gj = g(r, j);
          if (gj == 0.0) continue;
          for (Eigen::Index i = 0; i < k; ++i) {
            double d2 = 0.0;
            for (int d = 0; d < dim; ++d) {
              const double diff = n.aux(r, j * dim + d) - mu(r, i * dim + d);
              d2 += diff * diff;
            }
            const double resp = std::exp(w(r, i) - wlse - 0.5 * d2 * inv_var + log_norm - y(r, j));
            gw(r, i) += gj * (resp - std::exp(w(r, i) - wlse));
            for (int d = 0; d < dim; ++d) {
              gmu(r, i * dim + d) += gj * resp * (n.aux(r, j * dim + d) - mu(r, i * dim + d)) * inv_var;
            }
          }
        }
      }
      break;
    }
    case Op::weighted_sum: {
      Matrix& ga = grad_of(n.a);
      for (Eigen::Index i = 0; i < ga.size(); ++i) {
        if (n.aux.data()[i] != 0.0) ga.data()[i] += g(0, 0) * n.aux.data()[i];
      }
      break;
    }
    case Op::sum:
      grad_of(n.a).array() += g(0, 0);
      break;
  }
}

LstmWeights::LstmWeights(const std::string& prefix, int input_dim, int hidden)
    : w_x(prefix + ".w_x", input_dim, 4 * hidden),
      w_h(prefix + ".w_h", hidden, 4 * hidden),
      bias(prefix + ".bias", 1, 4 * hidden) {}

LstmState lstm_cell(Graph& g, Var x, LstmState prev, LstmWeights& w) {
  return lstm_cell_projected(g, g.matmul(x, g.param(w.w_x)), prev, w);
}

LstmState lstm_cell_projected(Graph& g, Var x_proj, LstmState prev, LstmWeights& w) {
  const Eigen::Index h = w.hidden();
  if (g.value(x_proj).cols() != 4 * h || g.value(prev.h).cols() != h || g.value(prev.c).cols() != h) {
    throw std::invalid_argument("lstm_cell: shape mismatch");
  }
  const Var pre = g.add_row(g.add(x_proj, g.matmul(prev.h, g.param(w.w_h))), g.param(w.bias));
  const Var i = g.sigmoid(g.slice_cols(pre, 0, h));
  const Var f = g.sigmoid(g.slice_cols(pre, h, h));
  const Var c_hat = g.tanh(g.slice_cols(pre, 2 * h, h));
  const Var o = g.sigmoid(g.slice_cols(pre, 3 * h, h));
  const Var c = g.add(g.mul(f, prev.c), g.mul(i, c_hat));
  return {g.mul(o, g.tanh(c)), c};
}

}  // namespace empower
