#include <catch_amalgamated.hpp>

#include "dap/autograd.hpp"
#include "dap/rng.hpp"
#include "fd_check.hpp"

using namespace dap;
using daptest::FdChecker;
using daptest::random_mat;

namespace {

// Scalar probe: sum(out .* W) with a fixed random weight so gradients are
// direction-dependent.
double probe_eval(const MatD& out, const MatD& w) { return out.cwiseProduct(w).sum(); }

ag::Var<double> probe(ag::Tape<double>& tape, ag::Var<double> out, const MatD& w) {
  return ag::sum(tape, ag::hadamard(tape, out, tape.leaf(w, false)));
}

}  // namespace

TEST_CASE("elementwise and matmul ops match finite differences") {
  Rng rng(7);
  MatD A = random_mat(rng, 4, 5);
  MatD B = random_mat(rng, 4, 5);
  MatD C = random_mat(rng, 5, 3);
  MatD bias = random_mat(rng, 1, 3);
  MatD w1 = random_mat(rng, 4, 5);
  MatD w2 = random_mat(rng, 4, 3);

  auto build = [&](bool want_grads) {
    ag::Tape<double> tape;
    auto a = tape.leaf(A, true);
    auto b = tape.leaf(B, true);
    auto c = tape.leaf(C, true);
    auto bb = tape.leaf(bias, true);
    auto h = ag::hadamard(tape, ag::add(tape, a, b), ag::affine(tape, ag::sub(tape, a, b), 0.5, 0.1));
    auto s1 = probe(tape, h, w1);
    auto m = ag::add_rowvec(tape, ag::matmul(tape, ag::gelu(tape, a), c), bb);
    auto s2 = probe(tape, ag::sigmoid(tape, m), w2);
    auto total = ag::add(tape, s1, s2);
    double value = total.val()(0, 0);
    std::vector<MatD> grads;
    if (want_grads) {
      tape.backward(total);
      grads = {a.grad(), b.grad(), c.grad(), bb.grad()};
    }
    return std::make_pair(value, grads);
  };

  FdChecker fd;
  auto report = fd.check({&A, &B, &C, &bias}, {"A", "B", "C", "bias"},
                         [&] { return build(false).first; }, [&] { return build(true).second; });
  INFO(report.where << " analytic=" << report.analytic_at_worst
                    << " numeric=" << report.numeric_at_worst);
  CHECK(report.max_rel_error < 1e-7);
}

TEST_CASE("normalization and softmax ops match finite differences") {
  Rng rng(11);
  MatD X = random_mat(rng, 5, 6);
  MatD gain = random_mat(rng, 1, 6, 0.3);
  gain.array() += 1.0;
  MatD bias = random_mat(rng, 1, 6, 0.2);
  MatD w = random_mat(rng, 5, 6);
  MatD wn = random_mat(rng, 5, 6);
  MatD ws = random_mat(rng, 5, 5);

  auto build = [&](bool want_grads) {
    ag::Tape<double> tape;
    auto x = tape.leaf(X, true);
    auto g = tape.leaf(gain, true);
    auto b = tape.leaf(bias, true);
    auto ln = ag::layer_norm(tape, x, g, b);
    auto sm = ag::softmax_rows(tape, x);
    auto nr = ag::row_normalize(tape, x);
    auto cossims = ag::matmul_nt(tape, nr, nr);
    auto total = ag::add(tape, probe(tape, ln, w),
                         ag::add(tape, probe(tape, nr, wn), probe(tape, cossims, ws)));
    total = ag::add(tape, total, probe(tape, sm, wn));
    double value = total.val()(0, 0);
    std::vector<MatD> grads;
    if (want_grads) {
      tape.backward(total);
      grads = {x.grad(), g.grad(), b.grad()};
    }
    return std::make_pair(value, grads);
  };

  FdChecker fd;
  auto report = fd.check({&X, &gain, &bias}, {"X", "gain", "bias"},
                         [&] { return build(false).first; }, [&] { return build(true).second; });
  INFO(report.where);
  CHECK(report.max_rel_error < 1e-7);
}

TEST_CASE("structural ops route gradients exactly") {
  Rng rng(13);
  MatD A = random_mat(rng, 6, 4);
  MatD B = random_mat(rng, 2, 4);
  MatD w = random_mat(rng, 5, 4);

  auto build = [&](bool want_grads) {
    ag::Tape<double> tape;
    auto a = tape.leaf(A, true);
    auto b = tape.leaf(B, true);
    auto cat = ag::concat_rows(tape, a, b);                       // 8 x 4
    auto sl = ag::slice_rows(tape, cat, 2, 5);                    // rows 2..6
    auto gg = ag::gather_rows(tape, sl, {4, 0, 0, 2, 3});         // duplicates
    auto pm = ag::permute_rows(tape, gg, {3, 1, 0, 2, 4});
    auto rs = ag::reshape(tape, pm, 4, 5);
    auto total = probe(tape, ag::reshape(tape, rs, 5, 4), w);
    double value = total.val()(0, 0);
    std::vector<MatD> grads;
    if (want_grads) {
      tape.backward(total);
      grads = {a.grad(), b.grad()};
    }
    return std::make_pair(value, grads);
  };

  FdChecker fd;
  auto report = fd.check({&A, &B}, {"A", "B"}, [&] { return build(false).first; },
                         [&] { return build(true).second; });
  CHECK(report.max_rel_error < 1e-8);
}

TEST_CASE("scale_rows flows gradients to tokens and weights") {
  Rng rng(17);
  MatD A = random_mat(rng, 5, 3);
  MatD W = random_mat(rng, 5, 1, 0.4);
  MatD p = random_mat(rng, 5, 3);

  auto build = [&](bool want_grads) {
    ag::Tape<double> tape;
    auto a = tape.leaf(A, true);
    auto w = tape.leaf(W, true);
    auto total = probe(tape, ag::scale_rows(tape, a, w), p);
    double value = total.val()(0, 0);
    std::vector<MatD> grads;
    if (want_grads) {
      tape.backward(total);
      grads = {a.grad(), w.grad()};
    }
    return std::make_pair(value, grads);
  };

  FdChecker fd;
  auto report = fd.check({&A, &W}, {"A", "W"}, [&] { return build(false).first; },
                         [&] { return build(true).second; });
  CHECK(report.max_rel_error < 1e-8);
}

TEST_CASE("embedding and stack_rows match finite differences") {
  Rng rng(19);
  MatD table = random_mat(rng, 7, 4);
  std::vector<int> ids = {3, 0, 3, 6, 1};
  MatD w = random_mat(rng, 6, 4);

  auto build = [&](bool want_grads) {
    ag::Tape<double> tape;
    auto t = tape.leaf(table, true);
    auto e = ag::embedding(tape, t, ids);
    auto r0 = ag::slice_rows(tape, e, 0, 1);
    auto stacked = ag::stack_rows<double>(tape, {r0, ag::slice_rows(tape, e, 2, 1),
                                                 ag::slice_rows(tape, e, 4, 1)});
    auto cat = ag::concat_rows(tape, e, ag::affine(tape, stacked, 2.0, 0.0));
    cat = ag::slice_rows(tape, cat, 2, 6);
    auto total = probe(tape, cat, w);
    double value = total.val()(0, 0);
    std::vector<MatD> grads;
    if (want_grads) {
      tape.backward(total);
      grads = {t.grad()};
    }
    return std::make_pair(value, grads);
  };

  FdChecker fd;
  auto report = fd.check({&table}, {"table"}, [&] { return build(false).first; },
                         [&] { return build(true).second; });
  CHECK(report.max_rel_error < 1e-8);
}

TEST_CASE("fused self-attention matches finite differences") {
  Rng rng(23);
  const int batch = 2, heads = 2;
  const Eigen::Index seq = 4, width = 6;
  MatD Q = random_mat(rng, batch * seq, width);
  MatD K = random_mat(rng, batch * seq, width);
  MatD V = random_mat(rng, batch * seq, width);
  MatD w = random_mat(rng, batch * seq, width);

  auto build = [&](bool want_grads) {
    ag::Tape<double> tape;
    auto q = tape.leaf(Q, true);
    auto k = tape.leaf(K, true);
    auto v = tape.leaf(V, true);
    auto ctx = ag::self_attention(tape, q, k, v, batch, seq, heads);
    auto total = probe(tape, ctx, w);
    double value = total.val()(0, 0);
    std::vector<MatD> grads;
    if (want_grads) {
      tape.backward(total);
      grads = {q.grad(), k.grad(), v.grad()};
    }
    return std::make_pair(value, grads);
  };

  FdChecker fd;
  auto report = fd.check({&Q, &K, &V}, {"Q", "K", "V"}, [&] { return build(false).first; },
                         [&] { return build(true).second; });
  INFO(report.where);
  CHECK(report.max_rel_error < 1e-7);
}

TEST_CASE("fused cross-attention matches finite differences") {
  Rng rng(29);
  const int batch = 2, heads = 3;
  const Eigen::Index seq_q = 3, seq_kv = 1, width = 6;
  MatD Q = random_mat(rng, batch * seq_q, width);
  MatD K = random_mat(rng, batch * seq_kv, width);
  MatD V = random_mat(rng, batch * seq_kv, width);
  MatD w = random_mat(rng, batch * seq_q, width);

  auto build = [&](bool want_grads) {
    ag::Tape<double> tape;
    auto q = tape.leaf(Q, true);
    auto k = tape.leaf(K, true);
    auto v = tape.leaf(V, true);
    auto ctx = ag::cross_attention(tape, q, k, v, batch, seq_q, seq_kv, heads);
    auto total = probe(tape, ctx, w);
    double value = total.val()(0, 0);
    std::vector<MatD> grads;
    if (want_grads) {
      tape.backward(total);
      grads = {q.grad(), k.grad(), v.grad()};
    }
    return std::make_pair(value, grads);
  };

  FdChecker fd;
  auto report = fd.check({&Q, &K, &V}, {"Q", "K", "V"}, [&] { return build(false).first; },
                         [&] { return build(true).second; });
  CHECK(report.max_rel_error < 1e-7);
}

TEST_CASE("attention probes record softmax maps and their gradients") {
  Rng rng(31);
  const int batch = 1, heads = 2;
  const Eigen::Index seq = 3, width = 4;
  MatD Q = random_mat(rng, seq, width);
  MatD K = random_mat(rng, seq, width);
  MatD V = random_mat(rng, seq, width);
  MatD w = random_mat(rng, seq, width);

  ag::Tape<double> tape;
  auto q = tape.leaf(Q, true);
  auto k = tape.leaf(K, true);
  auto v = tape.leaf(V, true);
  auto rec = std::make_shared<ag::AttentionProbes<double>>();
  auto ctx = ag::self_attention(tape, q, k, v, batch, seq, heads, rec);
  auto total = probe(tape, ctx, w);
  tape.backward(total);

  REQUIRE(rec->probs.size() == 2);
  REQUIRE(rec->grads.size() == 2);
  for (const auto& p : rec->probs) {
    for (Eigen::Index i = 0; i < p.rows(); ++i)
      CHECK(p.row(i).sum() == Catch::Approx(1.0).margin(1e-12));
  }
  // dL/dP for head h is dctx * V_h^T; verify directly for head 0.
  MatD dctx = w.leftCols(2);
  MatD expect = dctx * V.leftCols(2).transpose();
  CHECK((rec->grads[0] - expect).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("info_nce hand values and gradient") {
  // n=2, all pairwise cosines 0, tau=1: loss = log 2.
  ag::Tape<double> tape;
  MatD sims0 = MatD::Zero(2, 2);
  MaskGrid mask = MaskGrid::Ones(2, 2);
  auto loss = ag::info_nce_rows(tape, tape.leaf(sims0, false), mask, 1.0);
  CHECK(loss.val()(0, 0) == Catch::Approx(std::log(2.0)).epsilon(1e-12));

  // Saturated limit: positive cosine 1, negatives -1, small temperature -> 0.
  ag::Tape<double> tape2;
  MatD sims(2, 2);
  sims << 1.0, -1.0, -1.0, 1.0;
  auto loss2 = ag::info_nce_rows(tape2, tape2.leaf(sims, false), mask, 0.05);
  CHECK(loss2.val()(0, 0) < 1e-8);

  // Gradient against finite differences.
  Rng rng(37);
  MatD S = random_mat(rng, 3, 3, 0.5);
  MaskGrid m3 = MaskGrid::Ones(3, 3);
  m3(0, 1) = 0;  // one excluded negative
  auto build = [&](bool want_grads) {
    ag::Tape<double> t;
    auto s = t.leaf(S, true);
    auto l = ag::info_nce_rows(t, s, m3, 0.7);
    double value = l.val()(0, 0);
    std::vector<MatD> grads;
    if (want_grads) {
      t.backward(l);
      grads = {s.grad()};
    }
    return std::make_pair(value, grads);
  };
  FdChecker fd;
  auto report = fd.check({&S}, {"S"}, [&] { return build(false).first; },
                         [&] { return build(true).second; });
  CHECK(report.max_rel_error < 1e-8);
}

TEST_CASE("local_nce hand value, monotonicity, and gradient") {
  // All cosines equal, |FG| = |BG| = 1: loss = log 2.
  ag::Tape<double> tape;
  MatD sims(2, 1);
  sims << 0.4, 0.4;
  auto l = ag::local_nce(tape, tape.leaf(sims, false), {1, 0}, 1.0);
  CHECK(l.val()(0, 0) == Catch::Approx(std::log(2.0)).epsilon(1e-12));

  // Raising a BG similarity strictly raises the loss.
  MatD sims2 = sims;
  sims2(1, 0) = 0.9;
  ag::Tape<double> tape2;
  auto l2 = ag::local_nce(tape2, tape2.leaf(sims2, false), {1, 0}, 1.0);
  CHECK(l2.val()(0, 0) > l.val()(0, 0));

  Rng rng(41);
  MatD S = random_mat(rng, 6, 1, 0.8);
  std::vector<char> fg = {1, 0, 1, 0, 0, 1};
  auto build = [&](bool want_grads) {
    ag::Tape<double> t;
    auto s = t.leaf(S, true);
    auto ll = ag::local_nce(t, s, fg, 0.6);
    double value = ll.val()(0, 0);
    std::vector<MatD> grads;
    if (want_grads) {
      t.backward(ll);
      grads = {s.grad()};
    }
    return std::make_pair(value, grads);
  };
  FdChecker fd;
  auto report = fd.check({&S}, {"S"}, [&] { return build(false).first; },
                         [&] { return build(true).second; });
  CHECK(report.max_rel_error < 1e-8);

  CHECK_THROWS_AS(
      [&] {
        ag::Tape<double> t;
        return ag::local_nce(t, t.leaf(S, false), std::vector<char>{1, 1, 1, 1, 1, 1}, 1.0);
      }(),
      NumericError);
}
