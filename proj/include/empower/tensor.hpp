#pragma once

#include <Eigen/Core>
#include <string>
#include <vector>

#include "empower/rng.hpp"

namespace empower {

/// Row-major so that one row is one batch element.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// A named learnable tensor with its gradient accumulator and Adam moments.
struct ParamBlock {
  std::string name;
  Matrix values;
  Matrix grad;
  Matrix adam_m;
  Matrix adam_v;
  long step_count = 0;

  ParamBlock() = default;
  ParamBlock(std::string name, Eigen::Index rows, Eigen::Index cols);

  void zero_grad() { grad.setZero(); }
  Eigen::Index rows() const { return values.rows(); }
  Eigen::Index cols() const { return values.cols(); }
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam descent step on `block.grad`, which is zeroed afterwards.
/// Throws NumericError if the gradient holds a non-finite entry.
void adam_step(ParamBlock& block, const AdamConfig& cfg);

/// values ~ N(0, std^2) drawn from `rng`; std must be positive.
void gaussian_init(ParamBlock& block, Rng& rng, double std);

/// Handle to a node of a Graph.
struct Var {
  int id = -1;
};

/// Reverse-mode tape over 2-D tensors.
///
/// Nodes are appended in evaluation order, so the node list is a topological
/// order and `backward` walks it in reverse. Parameter nodes alias their
/// ParamBlock: gradients flow directly into `ParamBlock::grad`.
/// Every op checks its output for non-finite values (masked log-softmax
/// entries are allowed to be -inf) and throws NumericError naming the node.
class Graph {
 public:
  enum class Op {
    input,
    param,
    matmul,
    add,
    add_row,
    mul,
    scale,
    tanh,
    sigmoid,
    exp,
    log,
    log_softmax,
    logsumexp,
    gather_rows,
    pick,
    concat_cols,
    slice_cols,
    slice_rows,
    entropy,
    gmm_logpdf,
    weighted_sum,
    sum,
  };

  Var input(Matrix value);
  /// Same block twice returns the same node.
  Var param(ParamBlock& block);

  Var matmul(Var a, Var b);
  Var add(Var a, Var b);
  /// Adds a 1 x n row to every row of `a`.
  Var add_row(Var a, Var row);
  Var mul(Var a, Var b);
  Var scale(Var a, double c);
  Var tanh(Var a);
  Var sigmoid(Var a);
  Var exp(Var a);
  Var log(Var a);
  /// Row-wise log-softmax restricted to entries where mask != 0; masked entries
  /// become -inf. An empty mask means every entry is allowed.
  Var log_softmax(Var a, const Matrix& mask = Matrix());
  /// Row-wise log-sum-exp, n x 1.
  Var logsumexp(Var a);
  /// Rows of `table` selected by `rows`.
  Var gather_rows(Var table, const std::vector<int>& rows);
  /// out(r) = a(r, cols[r]), n x 1.
  Var pick(Var a, const std::vector<int>& cols);
  Var concat_cols(const std::vector<Var>& parts);
  Var slice_cols(Var a, Eigen::Index begin, Eigen::Index count);
  Var slice_rows(Var a, Eigen::Index begin, Eigen::Index count);
  /// Row-wise entropy -sum p log p of log-probabilities; -inf entries contribute 0.
  Var entropy(Var log_probs);
  /// Log-density of isotropic Gaussian mixtures. Row r has mixture logits
  /// (1 x K), means (1 x K*dim, component-major) and M query points (1 x M*dim);
  /// output is n x M.
  Var gmm_logpdf(Var logits, Var means, const Matrix& points, int dim, double sigma);
  /// Scalar sum(w .* a); entries with zero weight are skipped.
  Var weighted_sum(Var a, const Matrix& weights);
  Var sum(Var a);

  const Matrix& value(Var v) const;
  double scalar(Var v) const;
  int size() const { return static_cast<int>(nodes_.size()); }

  /// Backpropagates from a 1 x 1 loss. A graph can be differentiated once.
  void backward(Var loss);

 private:
  struct Node {
    explicit Node(Op o, int x = -1, int y = -1) : op(o), a(x), b(y) {}
    Op op;
    int a = -1;
    int b = -1;
    Matrix value;
    Matrix grad;
    ParamBlock* param = nullptr;
    std::vector<int> indices;
    std::vector<int> inputs;
    Matrix aux;
    Eigen::Index begin = 0;
    double scalar = 0.0;
    int dim = 0;
  };

  Var push(Node node);
  const Matrix& val(int id) const;
  Matrix& grad_of(int id);
  void backward_node(int id);
  void check_finite(int id) const;

  std::vector<Node> nodes_;
  std::vector<std::pair<const ParamBlock*, int>> param_nodes_;
  bool consumed_ = false;
};

const char* op_name(Graph::Op op);

/// LSTM parameters: gate order [input, forget, cell, output].
struct LstmWeights {
  ParamBlock w_x;   // in x 4H
  ParamBlock w_h;   // H x 4H
  ParamBlock bias;  // 1 x 4H

  LstmWeights() = default;
  LstmWeights(const std::string& prefix, int input_dim, int hidden);
  int hidden() const { return static_cast<int>(w_h.rows()); }
  std::vector<ParamBlock*> blocks() { return {&w_x, &w_h, &bias}; }
};

struct LstmState {
  Var h;
  Var c;
};

/// One recurrent step from a dense input x (n x in).
LstmState lstm_cell(Graph& g, Var x, LstmState prev, LstmWeights& w);
/// One recurrent step from an input already multiplied by w_x (n x 4H).
LstmState lstm_cell_projected(Graph& g, Var x_proj, LstmState prev, LstmWeights& w);

}  // namespace empower
