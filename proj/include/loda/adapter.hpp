#pragma once

#include <sstream>
#include <string>

#include "loda/errors.hpp"
#include "loda/format.hpp"
#include "loda/matrix.hpp"
#include "loda/numerics.hpp"
#include "loda/subspace.hpp"

namespace loda {

struct LoRABranch {
  Matrix A;  // r x D, down projection, anchored and normally frozen
  Matrix B;  // D' x r, up projection, trained
};

// Frozen backbone weight plus two additive low-rank branches:
//   Y = X (W + w_g B_G A_G + B_I A_I)^T
// Inference after integration uses W alone; the branches only exist while a
// task is being learned.
struct DualLoRALayer {
  Matrix W;  // D' x D
  LoRABranch general;
  LoRABranch isolated;
  double w_g = 0.5;
  bool general_enabled = true;
  bool isolated_enabled = true;

  std::size_t in_dim() const { return W.cols(); }
  std::size_t out_dim() const { return W.rows(); }
  std::size_t rank() const { return general.A.rows(); }
};

inline DualLoRALayer make_layer(const Matrix& W, std::size_t r, double w_g,
                                bool general_enabled, bool isolated_enabled) {
  if (r < 1 || r > std::min(W.rows(), W.cols()))
    throw ConfigError("make_layer: rank " + std::to_string(r) +
                      " exceeds layer bottleneck");
  DualLoRALayer layer;
  layer.W = W;
  layer.w_g = w_g;
  layer.general_enabled = general_enabled;
  layer.isolated_enabled = isolated_enabled;
  layer.general.A = Matrix(r, W.cols());
  layer.general.B = Matrix(W.rows(), r);
  layer.isolated.A = Matrix(r, W.cols());
  layer.isolated.B = Matrix(W.rows(), r);
  return layer;
}

// The general branch adopts the basis transpose directly; orthonormality is
// required, not re-established.
inline void anchor_general(DualLoRALayer& layer, const SubspaceBases& bases) {
  if (bases.kind != BasisKind::general)
    throw ConfigError("anchor_general: bases are not general-kind");
  if (bases.U.rows() != layer.in_dim() || bases.U.cols() != layer.rank())
    throw ConfigError("anchor_general: basis shape mismatch");
  Matrix gram = matmul_tn(bases.U, bases.U);
  if (max_abs_diff(gram, Matrix::identity(bases.U.cols())) > 1e-8)
    throw NumericError("anchor_general: bases are not orthonormal");
  layer.general.A = transpose(bases.U);
  layer.general.B = Matrix(layer.out_dim(), layer.rank());
}

// The isolated branch keeps only the span: basis columns are generally not
// orthonormal (they come from a whitened problem), so the rows of U^T are
// orthonormalized before use.
inline void anchor_isolated(DualLoRALayer& layer, const SubspaceBases& bases) {
  if (bases.U.rows() != layer.in_dim() || bases.U.cols() != layer.rank())
    throw ConfigError("anchor_isolated: basis shape mismatch");
  layer.isolated.A = thin_qr_rows(transpose(bases.U));
  layer.isolated.B = Matrix(layer.out_dim(), layer.rank());
}

inline void anchor(DualLoRALayer& layer, const SubspaceBases& general,
                   const SubspaceBases& isolated) {
  anchor_general(layer, general);
  anchor_isolated(layer, isolated);
}

inline Matrix forward(const DualLoRALayer& layer, const Matrix& X) {
  if (X.cols() != layer.in_dim())
    throw ConfigError("forward: input width mismatch");
  Matrix Y = matmul_nt(X, layer.W);
  if (layer.general_enabled) {
    Matrix xa = matmul_nt(X, layer.general.A);
    Matrix gy = matmul_nt(xa, layer.general.B);
    axpy(Y, layer.w_g, gy);
  }
  if (layer.isolated_enabled) {
    Matrix xa = matmul_nt(X, layer.isolated.A);
    Matrix iy = matmul_nt(xa, layer.isolated.B);
    axpy(Y, 1.0, iy);
  }
  return Y;
}

struct UpGradients {
  Matrix dB_general;
  Matrix dB_isolated;
};

// Gradients of the loss with respect to the up projections, given the
// upstream gradient G = dL/dY. The down projections stay frozen here.
inline UpGradients grad_up(const DualLoRALayer& layer, const Matrix& X,
                           const Matrix& G) {
  if (X.rows() != G.rows() || G.cols() != layer.out_dim() ||
      X.cols() != layer.in_dim())
    throw ConfigError("grad_up: shape mismatch");
  UpGradients g;
  g.dB_general = Matrix(layer.out_dim(), layer.rank());
  g.dB_isolated = Matrix(layer.out_dim(), layer.rank());
  if (layer.general_enabled) {
    Matrix xa = matmul_nt(X, layer.general.A);
    g.dB_general = scaled(matmul_tn(G, xa), layer.w_g);
  }
  if (layer.isolated_enabled) {
    Matrix xa = matmul_nt(X, layer.isolated.A);
    g.dB_isolated = matmul_tn(G, xa);
  }
  return g;
}

// Single-sample closed form for the output change after one gradient step
// of size eta on the up projection: dY = -eta ||A x^T||^2 g.
inline Matrix single_step_output_change(const Matrix& x, const Matrix& A,
                               const Matrix& g, double eta) {
  if (x.rows() != 1 || g.rows() != 1)
    throw ConfigError("single_step_output_change: expects single-row x and g");
  if (A.cols() != x.cols())
    throw ConfigError("single_step_output_change: width mismatch");
  Matrix ax = matmul_nt(x, A);
  double energy = 0.0;
  for (std::size_t j = 0; j < ax.cols(); ++j) energy += ax(0, j) * ax(0, j);
  return scaled(g, -eta * energy);
}

// Weight delta the branches contribute at integration time:
//   dW = w_g B_G Lambda A_G + B_I A_I
// with Lambda the diagonal of per-direction rescale factors.
inline Matrix effective_update(const DualLoRALayer& layer,
                               const std::vector<double>& lambda_diag) {
  Matrix dW(layer.out_dim(), layer.in_dim());
  if (layer.general_enabled) {
    if (lambda_diag.size() != layer.rank())
      throw ConfigError("effective_update: rescale diagonal length mismatch");
    for (double g : lambda_diag)
      if (!(g >= 0.0 && g <= 1.0))
        throw ConfigError("effective_update: rescale factor outside [0, 1]");
    Matrix bl = layer.general.B;
    for (std::size_t j = 0; j < bl.cols(); ++j)
      for (std::size_t i = 0; i < bl.rows(); ++i) bl(i, j) *= lambda_diag[j];
    axpy(dW, layer.w_g, matmul(bl, layer.general.A));
  }
  if (layer.isolated_enabled)
    axpy(dW, 1.0, matmul(layer.isolated.B, layer.isolated.A));
  return dW;
}

// Checksum over the tensors that training must never touch.
inline std::uint64_t frozen_checksum(const DualLoRALayer& layer) {
  std::uint64_t h = bit_checksum(layer.W);
  h = h * 1099511628211ULL ^ bit_checksum(layer.general.A);
  h = h * 1099511628211ULL ^ bit_checksum(layer.isolated.A);
  return h;
}

inline std::string serialize_layer(const DualLoRALayer& layer) {
  std::ostringstream os;
  os << "loda-layer v1\n";
  os << "dims " << layer.out_dim() << ' ' << layer.in_dim() << ' '
     << layer.rank() << '\n';
  os << "w_g " << format_double(layer.w_g) << '\n';
  os << "branches " << (layer.general_enabled ? 1 : 0) << ' '
     << (layer.isolated_enabled ? 1 : 0) << '\n';
  os << "W\n";
  write_matrix_block(os, layer.W);
  os << "A_G\n";
  write_matrix_block(os, layer.general.A);
  os << "B_G\n";
  write_matrix_block(os, layer.general.B);
  os << "A_I\n";
  write_matrix_block(os, layer.isolated.A);
  os << "B_I\n";
  write_matrix_block(os, layer.isolated.B);
  return os.str();
}

inline DualLoRALayer parse_layer(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  auto expect_line = [&](const std::string& what) {
    if (!std::getline(is, line))
      throw IoError("layer file truncated before " + what);
  };
  expect_line("header");
  if (line != "loda-layer v1") throw IoError("layer file: unrecognized header");
  expect_line("dims");
  auto dims = split(line, ' ');
  if (dims.size() != 4 || dims[0] != "dims")
    throw IoError("layer file: expected dims");
  bool ok1 = false, ok2 = false, ok3 = false;
  long dp = parse_long(dims[1], &ok1);
  long d = parse_long(dims[2], &ok2);
  long r = parse_long(dims[3], &ok3);
  if (!ok1 || !ok2 || !ok3 || dp < 1 || d < 1 || r < 1)
    throw IoError("layer file: bad dims");
  expect_line("w_g");
  auto wg = split(line, ' ');
  if (wg.size() != 2 || wg[0] != "w_g") throw IoError("layer file: expected w_g");
  bool okw = false;
  double w_g = parse_double(wg[1], &okw);
  if (!okw) throw IoError("layer file: bad w_g");
  expect_line("branches");
  auto br = split(line, ' ');
  if (br.size() != 3 || br[0] != "branches")
    throw IoError("layer file: expected branches");
  DualLoRALayer layer;
  layer.w_g = w_g;
  layer.general_enabled = br[1] == "1";
  layer.isolated_enabled = br[2] == "1";
  auto block = [&](const std::string& name, std::size_t rows,
                   std::size_t cols) {
    expect_line(name);
    if (line != name) throw IoError("layer file: expected block " + name);
    return read_matrix_block(is, rows, cols, name);
  };
  auto udp = static_cast<std::size_t>(dp);
  auto ud = static_cast<std::size_t>(d);
  auto ur = static_cast<std::size_t>(r);
  layer.W = block("W", udp, ud);
  layer.general.A = block("A_G", ur, ud);
  layer.general.B = block("B_G", udp, ur);
  layer.isolated.A = block("A_I", ur, ud);
  layer.isolated.B = block("B_I", udp, ur);
  return layer;
}

inline void save_layer(const DualLoRALayer& layer, const std::string& path) {
  write_text_file(path, serialize_layer(layer));
}

inline DualLoRALayer load_layer(const std::string& path) {
  return parse_layer(read_text_file(path));
}

}  // namespace loda
