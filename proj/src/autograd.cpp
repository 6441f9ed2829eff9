#include "promptseg/autograd.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <unordered_set>

namespace promptseg::ag {

namespace {

thread_local bool g_grad_enabled = true;

void require(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(what);
}

void accumulate(const NodePtr& n, const Matrix& g) {
  if (!n->requires_grad) return;
  n->grad_buffer() += g;
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

}  // namespace

Matrix& Node::grad_buffer() {
  if (grad.size() == 0) grad = Matrix::Zero(val().rows(), val().cols());
  return grad;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Var constant(Matrix value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return Var(n);
}

Var parameter(const Parameter& p) {
  auto n = std::make_shared<Node>();
  n->external = &p.value;
  n->param = &p;
  n->requires_grad = p.trainable && g_grad_enabled;
  return Var(n);
}

Var variable(Matrix value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = g_grad_enabled;
  return Var(n);
}

Var make_result(Matrix value, std::vector<Var> inputs, BackwardFn fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  bool any = false;
  if (g_grad_enabled) {
    for (const auto& in : inputs) any = any || in.requires_grad();
  }
  if (any) {
    n->requires_grad = true;
    n->inputs.reserve(inputs.size());
    for (auto& in : inputs) n->inputs.push_back(in.node());
    n->backward = std::move(fn);
  }
  return Var(n);
}

void backward(const Var& root) {
  require(root.rows() == 1 && root.cols() == 1, "backward: root must be a scalar");
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->grad_buffer().setConstant(1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->grad.size() == 0) continue;
    if (n->backward) n->backward(*n);
    if (n->param != nullptr) {
      const Parameter& p = *n->param;
      if (!p.has_grad()) p.grad = Matrix::Zero(p.value.rows(), p.value.cols());
      p.grad += n->grad;
    }
  }
}

Var matmul(const Var& a, const Var& b) {
  require(a.cols() == b.rows(), "matmul: inner dimensions differ");
  Matrix out = a.value() * b.value();
  return make_result(std::move(out), {a, b}, [](Node& self) {
    const auto& A = self.inputs[0];
    const auto& B = self.inputs[1];
    if (A->requires_grad) A->grad_buffer().noalias() += self.grad * B->val().transpose();
    if (B->requires_grad) B->grad_buffer().noalias() += A->val().transpose() * self.grad;
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  require(a.cols() == b.cols(), "matmul_nt: inner dimensions differ");
  Matrix out = a.value() * b.value().transpose();
  return make_result(std::move(out), {a, b}, [](Node& self) {
    const auto& A = self.inputs[0];
    const auto& B = self.inputs[1];
    if (A->requires_grad) A->grad_buffer().noalias() += self.grad * B->val();
    if (B->requires_grad) B->grad_buffer().noalias() += self.grad.transpose() * A->val();
  });
}

Var transpose(const Var& a) {
  Matrix out = a.value().transpose();
  return make_result(std::move(out), {a}, [](Node& self) {
    accumulate(self.inputs[0], self.grad.transpose());
  });
}

Var reshape(const Var& a, Index rows, Index cols) {
  require(rows * cols == a.rows() * a.cols(), "reshape: element count differs");
  Matrix out = Eigen::Map<const Matrix>(a.value().data(), rows, cols);
  return make_result(std::move(out), {a}, [](Node& self) {
    const auto& A = self.inputs[0];
    accumulate(A, Eigen::Map<const Matrix>(self.grad.data(), A->val().rows(), A->val().cols()));
  });
}

Var add(const Var& a, const Var& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
  Matrix out = a.value() + b.value();
  return make_result(std::move(out), {a, b}, [](Node& self) {
    accumulate(self.inputs[0], self.grad);
    accumulate(self.inputs[1], self.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shape mismatch");
  Matrix out = a.value() - b.value();
  return make_result(std::move(out), {a, b}, [](Node& self) {
    accumulate(self.inputs[0], self.grad);
    if (self.inputs[1]->requires_grad) self.inputs[1]->grad_buffer() -= self.grad;
  });
}

Var mul(const Var& a, const Var& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "mul: shape mismatch");
  Matrix out = a.value().cwiseProduct(b.value());
  return make_result(std::move(out), {a, b}, [](Node& self) {
    const auto& A = self.inputs[0];
    const auto& B = self.inputs[1];
    if (A->requires_grad) A->grad_buffer() += self.grad.cwiseProduct(B->val());
    if (B->requires_grad) B->grad_buffer() += self.grad.cwiseProduct(A->val());
  });
}

Var scale(const Var& a, double s) {
  Matrix out = a.value() * s;
  return make_result(std::move(out), {a}, [s](Node& self) {
    accumulate(self.inputs[0], self.grad * s);
  });
}

Var add_row_broadcast(const Var& a, const Var& row) {
  require(row.rows() == 1 && row.cols() == a.cols(), "add_row_broadcast: shape mismatch");
  Matrix out = a.value().rowwise() + row.value().row(0);
  return make_result(std::move(out), {a, row}, [](Node& self) {
    accumulate(self.inputs[0], self.grad);
    accumulate(self.inputs[1], self.grad.colwise().sum());
  });
}

Var add_col_broadcast(const Var& a, const Var& col) {
  require(col.cols() == 1 && col.rows() == a.rows(), "add_col_broadcast: shape mismatch");
  Matrix out = a.value().colwise() + col.value().col(0);
  return make_result(std::move(out), {a, col}, [](Node& self) {
    accumulate(self.inputs[0], self.grad);
    accumulate(self.inputs[1], self.grad.rowwise().sum());
  });
}

Var gelu(const Var& a) {
  const Matrix& x = a.value();
  Matrix out = x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); });
  return make_result(std::move(out), {a}, [](Node& self) {
    const auto& A = self.inputs[0];
    Matrix d = A->val().unaryExpr([](double v) {
      return 0.5 * (1.0 + std::erf(v * kInvSqrt2)) + v * kInvSqrt2Pi * std::exp(-0.5 * v * v);
    });
    A->grad_buffer() += self.grad.cwiseProduct(d);
  });
}

Var relu(const Var& a) {
  Matrix out = a.value().cwiseMax(0.0);
  return make_result(std::move(out), {a}, [](Node& self) {
    const auto& A = self.inputs[0];
    Matrix mask = (A->val().array() > 0.0).cast<double>().matrix();
    A->grad_buffer() += self.grad.cwiseProduct(mask);
  });
}

Var sigmoid(const Var& a) {
  Matrix out = a.value().unaryExpr([](double v) {
    if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
  });
  return make_result(std::move(out), {a}, [](Node& self) {
    const Matrix& s = self.value;
    self.inputs[0]->grad_buffer() += self.grad.cwiseProduct(s.cwiseProduct((1.0 - s.array()).matrix()));
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  const Index cols = parts.front().cols();
  Index rows = 0;
  for (const auto& p : parts) {
    require(p.cols() == cols, "concat_rows: column count differs");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  return make_result(std::move(out), parts, [](Node& self) {
    Index r0 = 0;
    for (const auto& in : self.inputs) {
      const Index n = in->val().rows();
      if (in->requires_grad) in->grad_buffer() += self.grad.middleRows(r0, n);
      r0 += n;
    }
  });
}

Var slice_rows(const Var& a, Index begin, Index count) {
  require(begin >= 0 && count >= 0 && begin + count <= a.rows(), "slice_rows: out of range");
  Matrix out = a.value().middleRows(begin, count);
  return make_result(std::move(out), {a}, [begin, count](Node& self) {
    self.inputs[0]->grad_buffer().middleRows(begin, count) += self.grad;
  });
}

Var slice_cols(const Var& a, Index begin, Index count) {
  require(begin >= 0 && count >= 0 && begin + count <= a.cols(), "slice_cols: out of range");
  Matrix out = a.value().middleCols(begin, count);
  return make_result(std::move(out), {a}, [begin, count](Node& self) {
    self.inputs[0]->grad_buffer().middleCols(begin, count) += self.grad;
  });
}

Var sum(const Var& a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return make_result(std::move(out), {a}, [](Node& self) {
    self.inputs[0]->grad_buffer().array() += self.grad(0, 0);
  });
}

Var mean(const Var& a) {
  const double n = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / n);
}

Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Matrix& X = x.value();
  const Index n = X.rows();
  const Index d = X.cols();
  require(gamma.rows() == 1 && gamma.cols() == d && beta.cols() == d, "layer_norm: parameter shape");
  Matrix xhat(n, d);
  Eigen::VectorXd inv_std(n);
  for (Index i = 0; i < n; ++i) {
    const double mu = X.row(i).mean();
    const double var = (X.row(i).array() - mu).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (X.row(i).array() - mu) * inv_std(i);
  }
  Matrix out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() + beta.value().row(0).array();
  return make_result(std::move(out), {x, gamma, beta},
                     [xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
    const auto& X = self.inputs[0];
    const auto& G = self.inputs[1];
    const auto& B = self.inputs[2];
    const Matrix& g = self.grad;
    if (G->requires_grad) G->grad_buffer() += g.cwiseProduct(xhat).colwise().sum();
    if (B->requires_grad) B->grad_buffer() += g.colwise().sum();
    if (X->requires_grad) {
      Matrix dxhat = g.array().rowwise() * G->val().row(0).array();
      Matrix& gx = X->grad_buffer();
      for (Index i = 0; i < dxhat.rows(); ++i) {
        const double m1 = dxhat.row(i).mean();
        const double m2 = dxhat.row(i).cwiseProduct(xhat.row(i)).mean();
        gx.row(i).array() += inv_std(i) * (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2);
      }
    }
  });
}

namespace {

void softmax_rows_inplace(Matrix& s) {
  for (Index i = 0; i < s.rows(); ++i) {
    const double m = s.row(i).maxCoeff();
    s.row(i) = (s.row(i).array() - m).exp();
    s.row(i) /= s.row(i).sum();
  }
}

}  // namespace

Matrix attention_weights(const Matrix& q, const Matrix& k, int heads) {
  require(heads > 0 && q.cols() % heads == 0 && q.cols() == k.cols(), "attention: head split");
  const Index dh = q.cols() / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  Matrix all(heads * q.rows(), k.rows());
  for (int h = 0; h < heads; ++h) {
    Matrix s = (q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose()) * inv;
    softmax_rows_inplace(s);
    all.middleRows(h * q.rows(), q.rows()) = s;
  }
  return all;
}

Var multihead_attention(const Var& q, const Var& k, const Var& v, int heads) {
  const Matrix& Q = q.value();
  const Matrix& K = k.value();
  const Matrix& V = v.value();
  require(heads > 0 && Q.cols() % heads == 0, "attention: width not divisible by heads");
  require(Q.cols() == K.cols() && K.rows() == V.rows() && V.cols() == Q.cols(),
          "attention: q/k/v shape mismatch");
  const Index dh = Q.cols() / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  const bool keep = g_grad_enabled && (q.requires_grad() || k.requires_grad() || v.requires_grad());

  Matrix out(Q.rows(), V.cols());
  std::vector<Matrix> probs;
  if (keep) probs.reserve(heads);
  for (int h = 0; h < heads; ++h) {
    Matrix p = (Q.middleCols(h * dh, dh) * K.middleCols(h * dh, dh).transpose()) * inv;
    softmax_rows_inplace(p);
    out.middleCols(h * dh, dh).noalias() = p * V.middleCols(h * dh, dh);
    if (keep) probs.push_back(std::move(p));
  }
  return make_result(std::move(out), {q, k, v},
                     [probs = std::move(probs), heads, dh, inv](Node& self) {
    const auto& Qn = self.inputs[0];
    const auto& Kn = self.inputs[1];
    const auto& Vn = self.inputs[2];
    for (int h = 0; h < heads; ++h) {
      const Matrix& p = probs[h];
      auto go = self.grad.middleCols(h * dh, dh);
      if (Vn->requires_grad) Vn->grad_buffer().middleCols(h * dh, dh).noalias() += p.transpose() * go;
      if (!Qn->requires_grad && !Kn->requires_grad) continue;
      Matrix dp = go * Vn->val().middleCols(h * dh, dh).transpose();
      Eigen::VectorXd rowdot = dp.cwiseProduct(p).rowwise().sum();
      Matrix ds = (p.array() * (dp.array().colwise() - rowdot.array())).matrix() * inv;
      if (Qn->requires_grad)
        Qn->grad_buffer().middleCols(h * dh, dh).noalias() += ds * Kn->val().middleCols(h * dh, dh);
      if (Kn->requires_grad)
        Kn->grad_buffer().middleCols(h * dh, dh).noalias() += ds.transpose() * Qn->val().middleCols(h * dh, dh);
    }
  });
}

Var pixel_shuffle2(const Var& x, Index height, Index width) {
  const Matrix& X = x.value();
  require(X.rows() % 4 == 0 && X.cols() == height * width, "pixel_shuffle2: shape mismatch");
  const Index c = X.rows() / 4;
  const Index ow = 2 * width;
  Matrix out(c, 4 * height * width);
  for (Index k = 0; k < 4; ++k) {
    const Index dy = k / 2;
    const Index dx = k % 2;
    for (Index o = 0; o < c; ++o) {
      const double* src = X.row(k * c + o).data();
      double* dst = out.row(o).data();
      for (Index y = 0; y < height; ++y)
        for (Index xx = 0; xx < width; ++xx) dst[(2 * y + dy) * ow + 2 * xx + dx] = src[y * width + xx];
    }
  }
  return make_result(std::move(out), {x}, [c, height, width, ow](Node& self) {
    Matrix& g = self.inputs[0]->grad_buffer();
    for (Index k = 0; k < 4; ++k) {
      const Index dy = k / 2;
      const Index dx = k % 2;
      for (Index o = 0; o < c; ++o) {
        const double* src = self.grad.row(o).data();
        double* dst = g.row(k * c + o).data();
        for (Index y = 0; y < height; ++y)
          for (Index xx = 0; xx < width; ++xx) dst[y * width + xx] += src[(2 * y + dy) * ow + 2 * xx + dx];
      }
    }
  });
}

Var pixel_unshuffle2(const Var& x, Index height, Index width) {
  const Matrix& X = x.value();
  require(height % 2 == 0 && width % 2 == 0 && X.cols() == height * width, "pixel_unshuffle2: shape mismatch");
  const Index c = X.rows();
  const Index hh = height / 2;
  const Index hw = width / 2;
  Matrix out(4 * c, hh * hw);
  for (Index k = 0; k < 4; ++k) {
    const Index dy = k / 2;
    const Index dx = k % 2;
    for (Index i = 0; i < c; ++i) {
      const double* src = X.row(i).data();
      double* dst = out.row(k * c + i).data();
      for (Index y = 0; y < hh; ++y)
        for (Index xx = 0; xx < hw; ++xx) dst[y * hw + xx] = src[(2 * y + dy) * width + 2 * xx + dx];
    }
  }
  return make_result(std::move(out), {x}, [c, hh, hw, width](Node& self) {
    Matrix& g = self.inputs[0]->grad_buffer();
    for (Index k = 0; k < 4; ++k) {
      const Index dy = k / 2;
      const Index dx = k % 2;
      for (Index i = 0; i < c; ++i) {
        const double* src = self.grad.row(k * c + i).data();
        double* dst = g.row(i).data();
        for (Index y = 0; y < hh; ++y)
          for (Index xx = 0; xx < hw; ++xx) dst[(2 * y + dy) * width + 2 * xx + dx] += src[y * hw + xx];
      }
    }
  });
}

}  // namespace promptseg::ag
