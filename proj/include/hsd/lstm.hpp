#pragma once

#include <random>
#include <string>
#include <vector>

#include "hsd/autodiff.hpp"

namespace hsd::nn {

// Gate layout in W/U/b columns: input, forget, cell, output.
struct LstmWeights {
  ad::Var input;      // in x 4H
  ad::Var recurrent;  // H x 4H
  ad::Var bias;       // 1 x 4H
  Eigen::Index hidden = 0;

  void append_to(ad::Params& params, const std::string& prefix) const {
    params.push_back({prefix + ".W", input});
    params.push_back({prefix + ".U", recurrent});
    params.push_back({prefix + ".b", bias});
  }
};

inline ad::Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  ad::Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

inline LstmWeights make_lstm(Eigen::Index in, Eigen::Index hidden, std::mt19937_64& rng) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(hidden));
  return {ad::parameter(random_matrix(in, 4 * hidden, scale, rng)),
          ad::parameter(random_matrix(hidden, 4 * hidden, scale, rng)),
          ad::parameter(ad::Matrix::Zero(1, 4 * hidden)), hidden};
}

// Runs the recurrence over the first `steps` rows of `x` (all rows when
// steps < 0), left to right or right to left. states[t] is the hidden state
// after consuming row t, indexed in input order.
inline std::vector<ad::Var> run_lstm(const ad::Var& x, const LstmWeights& w, bool reverse,
                                     Eigen::Index steps = -1) {
  const Eigen::Index n = steps < 0 ? x.rows() : steps;
  const Eigen::Index h = w.hidden;
  std::vector<ad::Var> states(static_cast<std::size_t>(n));
  if (n == 0) return states;
  const ad::Var projected = ad::add_row(ad::matmul(n == x.rows() ? x : ad::slice_rows(x, 0, n), w.input), w.bias);
  ad::Var hs = ad::constant(ad::Matrix::Zero(1, h));
  ad::Var cs = ad::constant(ad::Matrix::Zero(1, h));
  for (Eigen::Index k = 0; k < n; ++k) {
    const Eigen::Index t = reverse ? n - 1 - k : k;
    const ad::Var gates = ad::add(ad::slice_rows(projected, t, 1), ad::matmul(hs, w.recurrent));
    const ad::Var i = ad::sigmoid(ad::slice_cols(gates, 0, h));
    const ad::Var f = ad::sigmoid(ad::slice_cols(gates, h, h));
    const ad::Var g = ad::tanh(ad::slice_cols(gates, 2 * h, h));
    const ad::Var o = ad::sigmoid(ad::slice_cols(gates, 3 * h, h));
    cs = ad::add(ad::hadamard(f, cs), ad::hadamard(i, g));
    hs = ad::hadamard(o, ad::tanh(cs));
    states[static_cast<std::size_t>(t)] = hs;
  }
  return states;
}

}  // namespace hsd::nn
