#include "consistentid/autodiff.hpp"

#include "consistentid/errors.hpp"

#include <cmath>
#include <limits>
#include <memory>

namespace cid::ad {

const Matrix& Var::value() const { return tape_->value_of(id_); }
const Matrix& Var::grad() const { return tape_->grad_of(id_); }
bool Var::requires_grad() const { return tape_->requires_grad_of(id_); }

const Matrix& Tape::value_of(int id) const {
  const Node& n = nodes_[static_cast<std::size_t>(id)];
  return n.external ? *n.external : n.value;
}

const Matrix& Tape::grad_of(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }

Var Tape::constant(Matrix value) {
  Node& n = nodes_.emplace_back();
  n.value = std::move(value);
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::leaf(Matrix value) {
  Node& n = nodes_.emplace_back();
  n.value = std::move(value);
  n.requires_grad = grad_enabled_;
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::param(Parameter& p) {
  Node& n = nodes_.emplace_back();
  n.external = &p.value;
  n.requires_grad = grad_enabled_ && p.trainable;
  if (n.requires_grad) n.param = &p;
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

bool Tape::any_requires_grad(std::initializer_list<Var> vars) const {
  if (!grad_enabled_) return false;
  for (const Var& v : vars) {
    if (v.requires_grad()) return true;
  }
  return false;
}

Var Tape::record(Matrix value, bool requires_grad, BackwardFn fn) {
  Node& n = nodes_.emplace_back();
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.backward = std::move(fn);
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

void Tape::accumulate(const Var& v, const Matrix& g) {
  Node& n = nodes_[static_cast<std::size_t>(v.id())];
  if (!n.requires_grad) return;
  if (!n.has_grad) {
    n.grad = g;
    n.has_grad = true;
  } else {
    n.grad += g;
  }
}

void Tape::backward(const Var& scalar) {
  if (scalar.tape() != this) throw ShapeError("backward: variable belongs to another tape");
  if (scalar.rows() != 1 || scalar.cols() != 1) throw ShapeError("backward: loss must be 1x1");
  if (!scalar.requires_grad()) return;
  accumulate(scalar, Matrix::Ones(1, 1));
  for (int id = scalar.id(); id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.has_grad) continue;
    if (n.backward) n.backward(n.grad);
    if (n.param) {
      if (n.param->grad.rows() != n.grad.rows() || n.param->grad.cols() != n.grad.cols()) {
        n.param->grad.setZero(n.grad.rows(), n.grad.cols());
      }
      n.param->grad += n.grad;
    }
  }
}

namespace {

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()) + ")");
  }
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimensions differ");
  Tape& t = *a.tape();
  Matrix out = a.value() * b.value();
  const bool rg = t.any_requires_grad({a, b});
  return t.record(std::move(out), rg, [a, b, &t](const Matrix& g) {
    if (a.requires_grad()) t.accumulate(a, g * b.value().transpose());
    if (b.requires_grad()) t.accumulate(b, a.value().transpose() * g);
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  if (a.cols() != b.cols()) throw ShapeError("matmul_nt: column counts differ");
  Tape& t = *a.tape();
  Matrix out = a.value() * b.value().transpose();
  const bool rg = t.any_requires_grad({a, b});
  return t.record(std::move(out), rg, [a, b, &t](const Matrix& g) {
    if (a.requires_grad()) t.accumulate(a, g * b.value());
    if (b.requires_grad()) t.accumulate(b, g.transpose() * a.value());
  });
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tape& t = *a.tape();
  const bool rg = t.any_requires_grad({a, b});
  return t.record(a.value() + b.value(), rg, [a, b, &t](const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tape& t = *a.tape();
  const bool rg = t.any_requires_grad({a, b});
  return t.record(a.value() - b.value(), rg, [a, b, &t](const Matrix& g) {
    t.accumulate(a, g);
    if (b.requires_grad()) t.accumulate(b, -g);
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tape& t = *a.tape();
  const bool rg = t.any_requires_grad({a, b});
  return t.record(a.value().cwiseProduct(b.value()), rg, [a, b, &t](const Matrix& g) {
    if (a.requires_grad()) t.accumulate(a, g.cwiseProduct(b.value()));
    if (b.requires_grad()) t.accumulate(b, g.cwiseProduct(a.value()));
  });
}

Var scale(const Var& a, double s) {
  Tape& t = *a.tape();
  const bool rg = t.any_requires_grad({a});
  return t.record(a.value() * s, rg, [a, s, &t](const Matrix& g) { t.accumulate(a, g * s); });
}

Var add_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeError("add_row: bias must be 1xC");
  Tape& t = *a.tape();
  Matrix out = a.value();
  out.rowwise() += row.value().row(0);
  const bool rg = t.any_requires_grad({a, row});
  return t.record(std::move(out), rg, [a, row, &t](const Matrix& g) {
    t.accumulate(a, g);
    if (row.requires_grad()) t.accumulate(row, g.colwise().sum());
  });
}

Var silu(const Var& a) {
  Tape& t = *a.tape();
  const Matrix& x = a.value();
  Matrix sig = (1.0 + (-x.array()).exp()).inverse().matrix();
  Matrix out = x.cwiseProduct(sig);
  const bool rg = t.any_requires_grad({a});
  return t.record(std::move(out), rg, [a, sig = std::move(sig), &t](const Matrix& g) {
    const auto& xv = a.value().array();
    Matrix d = (sig.array() * (1.0 + xv * (1.0 - sig.array()))).matrix();
    t.accumulate(a, g.cwiseProduct(d));
  });
}

Var softmax_rows(const Var& a) {
  Tape& t = *a.tape();
  const Matrix& x = a.value();
  Matrix y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    y.row(r) = (x.row(r).array() - m).exp().matrix();
    y.row(r) /= y.row(r).sum();
  }
  const bool rg = t.any_requires_grad({a});
  auto shared = std::make_shared<Matrix>(y);
  return t.record(std::move(y), rg, [a, shared, &t](const Matrix& g) {
    const Matrix& yv = *shared;
    Eigen::VectorXd dots = g.cwiseProduct(yv).rowwise().sum();
    Matrix d = yv.cwiseProduct(g - dots.replicate(1, g.cols()));
    t.accumulate(a, d);
  });
}

Var sum(const Var& a) {
  Tape& t = *a.tape();
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  const bool rg = t.any_requires_grad({a});
  return t.record(std::move(out), rg, [a, &t](const Matrix& g) {
    t.accumulate(a, Matrix::Constant(a.rows(), a.cols(), g(0, 0)));
  });
}

Var mean(const Var& a) {
  const double n = static_cast<double>(a.rows() * a.cols());
  return scale(sum(a), 1.0 / n);
}

Var mse(const Var& a, const Var& b) {
  require_same_shape(a, b, "mse");
  Tape& t = *a.tape();
  const double n = static_cast<double>(a.rows() * a.cols());
  Matrix out(1, 1);
  out(0, 0) = (a.value() - b.value()).squaredNorm() / n;
  const bool rg = t.any_requires_grad({a, b});
  return t.record(std::move(out), rg, [a, b, n, &t](const Matrix& g) {
    Matrix d = (a.value() - b.value()) * (2.0 * g(0, 0) / n);
    if (a.requires_grad()) t.accumulate(a, d);
    if (b.requires_grad()) t.accumulate(b, -d);
  });
}

Var weighted_sum(const Var& a, const Matrix& w) {
  if (a.rows() != w.rows() || a.cols() != w.cols()) throw ShapeError("weighted_sum: shape mismatch");
  Tape& t = *a.tape();
  Matrix out(1, 1);
  out(0, 0) = a.value().cwiseProduct(w).sum();
  const bool rg = t.any_requires_grad({a});
  return t.record(std::move(out), rg, [a, w, &t](const Matrix& g) { t.accumulate(a, w * g(0, 0)); });
}

Var concat_cols(const Var& a, const Var& b) {
  if (a.rows() != b.rows()) throw ShapeError("concat_cols: row counts differ");
  Tape& t = *a.tape();
  Matrix out(a.rows(), a.cols() + b.cols());
  out << a.value(), b.value();
  const bool rg = t.any_requires_grad({a, b});
  return t.record(std::move(out), rg, [a, b, &t](const Matrix& g) {
    if (a.requires_grad()) t.accumulate(a, g.leftCols(a.cols()));
    if (b.requires_grad()) t.accumulate(b, g.rightCols(b.cols()));
  });
}

Var concat_rows(const Var& a, const Var& b) {
  if (a.cols() != b.cols()) throw ShapeError("concat_rows: column counts differ");
  Tape& t = *a.tape();
  Matrix out(a.rows() + b.rows(), a.cols());
  out << a.value(), b.value();
  const bool rg = t.any_requires_grad({a, b});
  return t.record(std::move(out), rg, [a, b, &t](const Matrix& g) {
    if (a.requires_grad()) t.accumulate(a, g.topRows(a.rows()));
    if (b.requires_grad()) t.accumulate(b, g.bottomRows(b.rows()));
  });
}

Var replace_rows(const Var& base, const Var& rows, std::span<const int> positions) {
  if (static_cast<Eigen::Index>(positions.size()) != rows.rows()) {
    throw ShapeError("replace_rows: one position per replacement row required");
  }
  if (rows.cols() != base.cols()) throw ShapeError("replace_rows: column counts differ");
  Tape& t = *base.tape();
  Matrix out = base.value();
  std::vector<int> pos(positions.begin(), positions.end());
  for (std::size_t j = 0; j < pos.size(); ++j) {
    if (pos[j] < 0 || pos[j] >= base.rows()) throw IndexError("replace_rows: position out of range");
    out.row(pos[j]) = rows.value().row(static_cast<Eigen::Index>(j));
  }
  const bool rg = t.any_requires_grad({base, rows});
  return t.record(std::move(out), rg, [base, rows, pos, &t](const Matrix& g) {
    if (base.requires_grad()) {
      Matrix gb = g;
      for (int p : pos) gb.row(p).setZero();
      t.accumulate(base, gb);
    }
    if (rows.requires_grad()) {
      Matrix gr(rows.rows(), rows.cols());
      for (std::size_t j = 0; j < pos.size(); ++j) gr.row(static_cast<Eigen::Index>(j)) = g.row(pos[j]);
      t.accumulate(rows, gr);
    }
  });
}

Var mask_rows(const Var& a, const std::vector<bool>& keep) {
  if (static_cast<Eigen::Index>(keep.size()) != a.rows()) throw ShapeError("mask_rows: flag count mismatch");
  Tape& t = *a.tape();
  Matrix out = a.value();
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    if (!keep[static_cast<std::size_t>(r)]) out.row(r).setZero();
  }
  const bool rg = t.any_requires_grad({a});
  return t.record(std::move(out), rg, [a, keep, &t](const Matrix& g) {
    Matrix d = g;
    for (Eigen::Index r = 0; r < d.rows(); ++r) {
      if (!keep[static_cast<std::size_t>(r)]) d.row(r).setZero();
    }
    t.accumulate(a, d);
  });
}

Var slice_rows(const Var& a, int begin, int count) {
  if (begin < 0 || count < 0 || begin + count > a.rows()) throw IndexError("slice_rows: range out of bounds");
  Tape& t = *a.tape();
  Matrix out = a.value().middleRows(begin, count);
  const bool rg = t.any_requires_grad({a});
  return t.record(std::move(out), rg, [a, begin, count, &t](const Matrix& g) {
    Matrix d = Matrix::Zero(a.rows(), a.cols());
    d.middleRows(begin, count) = g;
    t.accumulate(a, d);
  });
}

Var gather_rows(const Var& table, std::span<const int> ids) {
  Tape& t = *table.tape();
  std::vector<int> idx(ids.begin(), ids.end());
  Matrix out(static_cast<Eigen::Index>(idx.size()), table.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= table.rows()) throw IndexError("gather_rows: id out of range");
    out.row(static_cast<Eigen::Index>(i)) = table.value().row(idx[i]);
  }
  const bool rg = t.any_requires_grad({table});
  return t.record(std::move(out), rg, [table, idx, &t](const Matrix& g) {
    Matrix d = Matrix::Zero(table.rows(), table.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) d.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
    t.accumulate(table, d);
  });
}

namespace {

Matrix im2col3x3(const Matrix& x, int height, int width) {
  const Eigen::Index cin = x.cols();
  Matrix cols = Matrix::Zero(static_cast<Eigen::Index>(height) * width, 9 * cin);
  for (int y = 0; y < height; ++y) {
    for (int xx = 0; xx < width; ++xx) {
      const Eigen::Index row = static_cast<Eigen::Index>(y) * width + xx;
      for (int ky = 0; ky < 3; ++ky) {
        const int iy = y + ky - 1;
        if (iy < 0 || iy >= height) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int ix = xx + kx - 1;
          if (ix < 0 || ix >= width) continue;
          cols.block(row, (ky * 3 + kx) * cin, 1, cin) = x.row(static_cast<Eigen::Index>(iy) * width + ix);
        }
      }
    }
  }
  return cols;
}

Matrix col2im3x3(const Matrix& cols, int height, int width, Eigen::Index cin) {
  Matrix x = Matrix::Zero(static_cast<Eigen::Index>(height) * width, cin);
  for (int y = 0; y < height; ++y) {
    for (int xx = 0; xx < width; ++xx) {
      const Eigen::Index row = static_cast<Eigen::Index>(y) * width + xx;
      for (int ky = 0; ky < 3; ++ky) {
        const int iy = y + ky - 1;
        if (iy < 0 || iy >= height) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int ix = xx + kx - 1;
          if (ix < 0 || ix >= width) continue;
          x.row(static_cast<Eigen::Index>(iy) * width + ix) += cols.block(row, (ky * 3 + kx) * cin, 1, cin);
        }
      }
    }
  }
  return x;
}

}  // namespace

Var conv3x3(const Var& x, int height, int width, const Var& weight, const Var& bias) {
  const Eigen::Index cin = x.cols();
  if (x.rows() != static_cast<Eigen::Index>(height) * width) throw ShapeError("conv3x3: pixel count mismatch");
  if (weight.rows() != 9 * cin) throw ShapeError("conv3x3: weight rows must be 9*Cin");
  if (bias.rows() != 1 || bias.cols() != weight.cols()) throw ShapeError("conv3x3: bias must be 1xCout");
  Tape& t = *x.tape();
  auto cols = std::make_shared<Matrix>(im2col3x3(x.value(), height, width));
  Matrix out = (*cols) * weight.value();
  out.rowwise() += bias.value().row(0);
  const bool rg = t.any_requires_grad({x, weight, bias});
  return t.record(std::move(out), rg, [x, weight, bias, cols, height, width, cin, &t](const Matrix& g) {
    if (weight.requires_grad()) t.accumulate(weight, cols->transpose() * g);
    if (bias.requires_grad()) t.accumulate(bias, g.colwise().sum());
    if (x.requires_grad()) {
      Matrix dcols = g * weight.value().transpose();
      t.accumulate(x, col2im3x3(dcols, height, width, cin));
    }
  });
}

Var avg_pool2(const Var& x, int height, int width) {
  if (height % 2 != 0 || width % 2 != 0) throw DimensionError("avg_pool2: odd spatial size");
  if (x.rows() != static_cast<Eigen::Index>(height) * width) throw ShapeError("avg_pool2: pixel count mismatch");
  Tape& t = *x.tape();
  const int oh = height / 2;
  const int ow = width / 2;
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(oh) * ow, x.cols());
  const Matrix& xv = x.value();
  for (int y = 0; y < height; ++y) {
    for (int xx = 0; xx < width; ++xx) {
      out.row((y / 2) * ow + xx / 2) += 0.25 * xv.row(static_cast<Eigen::Index>(y) * width + xx);
    }
  }
  const bool rg = t.any_requires_grad({x});
  return t.record(std::move(out), rg, [x, height, width, ow, &t](const Matrix& g) {
    Matrix d(x.rows(), x.cols());
    for (int y = 0; y < height; ++y) {
      for (int xx = 0; xx < width; ++xx) {
        d.row(static_cast<Eigen::Index>(y) * width + xx) = 0.25 * g.row((y / 2) * ow + xx / 2);
      }
    }
    t.accumulate(x, d);
  });
}

Var upsample2(const Var& x, int height, int width) {
  if (x.rows() != static_cast<Eigen::Index>(height) * width) throw ShapeError("upsample2: pixel count mismatch");
  Tape& t = *x.tape();
  const int oh = height * 2;
  const int ow = width * 2;
  Matrix out(static_cast<Eigen::Index>(oh) * ow, x.cols());
  const Matrix& xv = x.value();
  for (int y = 0; y < oh; ++y) {
    for (int xx = 0; xx < ow; ++xx) {
      out.row(static_cast<Eigen::Index>(y) * ow + xx) = xv.row((y / 2) * width + xx / 2);
    }
  }
  const bool rg = t.any_requires_grad({x});
  return t.record(std::move(out), rg, [x, width, oh, ow, &t](const Matrix& g) {
    Matrix d = Matrix::Zero(x.rows(), x.cols());
    for (int y = 0; y < oh; ++y) {
      for (int xx = 0; xx < ow; ++xx) {
        d.row((y / 2) * width + xx / 2) += g.row(static_cast<Eigen::Index>(y) * ow + xx);
      }
    }
    t.accumulate(x, d);
  });
}

}  // namespace cid::ad
