#include "odeinf/autodiff.hpp"

#include <gtest/gtest.h>

#include <functional>

using namespace odeinf;
using namespace odeinf::ad;
using Mat = Matrix<double>;

namespace {

using Builder = std::function<Var(Tape<double>&, std::vector<Var>&)>;

Mat random_mat(Eigen::Index r, Eigen::Index c, Rng& rng, double scale = 1.0) {
    Mat m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
    return m;
}

double evaluate(ParameterStore<double>& ps, const Builder& f) {
    Tape<double> t(false);
    std::vector<Var> in;
    for (auto& p : ps) in.push_back(t.parameter(p));
    return t.value(f(t, in))(0, 0);
}

/// Max error between the tape gradient and central differences, relative above magnitude 1 and absolute below.
double check(ParameterStore<double>& ps, const Builder& f, double h = 1e-6) {
    ps.zero_grad();
    {
        Tape<double> t(true);
        std::vector<Var> in;
        for (auto& p : ps) in.push_back(t.parameter(p));
        t.backward(f(t, in));
    }
    double worst = 0.0;
    std::size_t k = 0;
    for (auto& p : ps) {
        for (Eigen::Index i = 0; i < p.value.size(); ++i, ++k) {
            const double x = p.value.data()[i];
            p.value.data()[i] = x + h;
            const double up = evaluate(ps, f);
            p.value.data()[i] = x - h;
            const double dn = evaluate(ps, f);
            p.value.data()[i] = x;
            const double num = (up - dn) / (2 * h);
            const double ana = p.grad.data()[i];
            worst = std::max(worst, std::abs(num - ana) / std::max(1.0, std::abs(num) + std::abs(ana)));
        }
    }
    return worst;
}

// Scalar reduction with fixed random weights so every output entry matters.
Var project(Tape<double>& t, Var v, std::uint64_t seed) {
    Rng rng(seed);
    const Mat& val = t.value(v);
    return sum(t, mul(t, v, t.constant(random_mat(val.rows(), val.cols(), rng))));
}

} // namespace

TEST(Autodiff, ElementwiseOps) {
    Rng rng(1);
    ParameterStore<double> ps;
    ps.add("a", random_mat(3, 4, rng));
    ps.add("b", random_mat(3, 4, rng));
    ps.add("r", random_mat(1, 4, rng));
    EXPECT_LT(check(ps, [](auto& t, auto& in) { return project(t, add(t, in[0], in[1]), 1); }), 1e-7);
    EXPECT_LT(check(ps, [](auto& t, auto& in) { return project(t, sub(t, in[0], in[1]), 2); }), 1e-7);
    EXPECT_LT(check(ps, [](auto& t, auto& in) { return project(t, mul(t, in[0], in[1]), 3); }), 1e-7);
    EXPECT_LT(check(ps, [](auto& t, auto& in) { return project(t, scale(t, in[0], 2.5), 4); }), 1e-7);
    EXPECT_LT(check(ps, [](auto& t, auto& in) { return project(t, add_row(t, in[0], in[2]), 5); }), 1e-7);
    EXPECT_LT(check(ps, [](auto& t, auto& in) { return project(t, exp(t, in[0]), 6); }), 1e-7);
    EXPECT_LT(check(ps, [](auto& t, auto& in) { return project(t, gelu(t, in[0]), 7); }), 1e-7);
    EXPECT_LT(check(ps, [](auto& t, auto& in) { return project(t, elu1(t, in[0]), 8); }), 1e-6);
}

TEST(Autodiff, ConstantScalings) {
    Rng rng(2);
    ParameterStore<double> ps;
    ps.add("a", random_mat(4, 3, rng));
    const Mat row = random_mat(1, 3, rng), col = random_mat(4, 1, rng), inv = random_mat(1, 3, rng);
    EXPECT_LT(check(ps, [&](auto& t, auto& in) { return project(t, mul_row_const(t, in[0], row), 1); }), 1e-7);
    EXPECT_LT(check(ps, [&](auto& t, auto& in) { return project(t, mul_col_const(t, in[0], col), 2); }), 1e-7);
    EXPECT_LT(check(ps, [&](auto& t, auto& in) { return project(t, affine_cols_const(t, in[0], row, inv), 3); }), 1e-7);
}

TEST(Autodiff, MatmulLinearLayerNorm) {
    Rng rng(3);
    ParameterStore<double> ps;
    ps.add("x", random_mat(5, 4, rng));
    ps.add("w", random_mat(4, 3, rng));
    ps.add("b", random_mat(1, 3, rng));
    ps.add("g", random_mat(1, 4, rng));
    ps.add("beta", random_mat(1, 4, rng));
    EXPECT_LT(check(ps, [](auto& t, auto& in) { return project(t, matmul(t, in[0], in[1]), 1); }), 1e-7);
    EXPECT_LT(check(ps, [](auto& t, auto& in) { return project(t, linear(t, in[0], in[1], in[2]), 2); }), 1e-7);
    EXPECT_LT(check(ps, [](auto& t, auto& in) { return project(t, layer_norm(t, in[0], in[3], in[4]), 3); }), 1e-6);
}

TEST(Autodiff, Restructuring) {
    Rng rng(4);
    ParameterStore<double> ps;
    ps.add("a", random_mat(3, 2, rng));
    ps.add("b", random_mat(3, 3, rng));
    EXPECT_LT(check(ps, [](auto& t, auto& in) { return project(t, concat_cols(t, {in[0], in[1], in[0]}), 1); }), 1e-7);
    EXPECT_LT(check(ps, [](auto& t, auto& in) { return project(t, slice_cols(t, in[1], 1, 2), 2); }), 1e-7);
    EXPECT_LT(check(ps, [](auto& t, auto& in) { return project(t, gather_rows(t, in[1], {2, 0, 2, 1}), 3); }), 1e-7);
}

TEST(Autodiff, SoftmaxAttention) {
    Rng rng(5);
    ParameterStore<double> ps;
    ps.add("q", random_mat(3, 8, rng));
    ps.add("k", random_mat(6, 8, rng));
    ps.add("v", random_mat(6, 8, rng));
    EXPECT_LT(check(ps, [](auto& t, auto& in) { return project(t, softmax_attention(t, in[0], in[1], in[2], 2), 1); }), 1e-6);
}

TEST(Autodiff, SoftmaxAttentionMatchesReference) {
    Rng rng(6);
    const Mat Q = random_mat(2, 4, rng), K = random_mat(5, 4, rng), V = random_mat(5, 4, rng);
    Tape<double> t(false);
    const Mat out = t.value(softmax_attention(t, t.constant(Q), t.constant(K), t.constant(V), 2));
    for (int h = 0; h < 2; ++h) {
        const Mat s = Q.middleCols(2 * h, 2) * K.middleCols(2 * h, 2).transpose() / std::sqrt(2.0);
        for (Eigen::Index i = 0; i < 2; ++i) {
            Eigen::RowVectorXd w = (s.row(i).array() - s.row(i).maxCoeff()).exp();
            w /= w.sum();
            const Eigen::RowVectorXd ref = w * V.middleCols(2 * h, 2);
            EXPECT_LT((out.row(i).segment(2 * h, 2) - ref).cwiseAbs().maxCoeff(), 1e-12);
        }
    }
}

TEST(Autodiff, LinearAttention) {
    Rng rng(7);
    ParameterStore<double> ps;
    Mat fq = random_mat(4, 6, rng).cwiseAbs(), fk = random_mat(5, 6, rng).cwiseAbs();
    ps.add("fq", (fq.array() + 0.1).matrix());
    ps.add("fk", (fk.array() + 0.1).matrix());
    ps.add("v", random_mat(5, 6, rng));
    EXPECT_LT(check(ps, [](auto& t, auto& in) { return project(t, linear_attention(t, in[0], in[1], in[2], 3), 1); }), 1e-6);
}

TEST(Autodiff, LinearAttentionMatchesReference) {
    Rng rng(8);
    const Mat FQ = random_mat(3, 2, rng).cwiseAbs(), FK = random_mat(4, 2, rng).cwiseAbs(), V = random_mat(4, 2, rng);
    Tape<double> t(false);
    const Mat out = t.value(linear_attention(t, t.constant(FQ), t.constant(FK), t.constant(V), 1));
    for (Eigen::Index i = 0; i < 3; ++i) {
        Eigen::RowVectorXd num = Eigen::RowVectorXd::Zero(2);
        double den = 0.0;
        for (Eigen::Index j = 0; j < 4; ++j) {
            const double s = FQ.row(i).dot(FK.row(j));
            num += s * V.row(j);
            den += s;
        }
        EXPECT_LT((out.row(i) - num / den).cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(Autodiff, Losses) {
    Rng rng(9);
    ParameterStore<double> ps;
    ps.add("p", random_mat(6, 3, rng));
    ps.add("u", random_mat(6, 1, rng, 0.5));
    const Mat target = random_mat(6, 3, rng);
    EXPECT_LT(check(ps, [&](auto& t, auto& in) { return weighted_l1(t, in[0], target, 0.3); }), 1e-7);
    EXPECT_LT(check(ps, [&](auto& t, auto& in) { return uncertainty_l1(t, in[0], in[1], target, {1, 1, 0}); }), 1e-7);
}

TEST(Autodiff, UncertaintyLossValue) {
    Tape<double> t(false);
    Mat p(2, 3), target(2, 3), u(2, 1);
    p << 1, 5, 0, 2, 7, 0;
    target << 0, 100, 9, 4, -100, 9;
    u << 0.0, std::log(2.0);
    const double v = t.value(uncertainty_l1(t, t.constant(p), t.constant(u), target, {1, 0, 0}))(0, 0);
    // rows: e^0 * 1 + 0, e^{-log 2} * 2 + log 2
    EXPECT_NEAR(v, 0.5 * (1.0 + 1.0 + std::log(2.0)), 1e-14);
}

TEST(Autodiff, ParameterCachedPerTape) {
    ParameterStore<double> ps;
    ps.add("w", Mat::Ones(2, 2));
    Tape<double> t(true);
    const Var a = t.parameter(ps[0]);
    const Var b = t.parameter(ps[0]);
    EXPECT_EQ(a.id, b.id);
    t.backward(sum(t, add(t, a, b)));
    EXPECT_TRUE(ps[0].grad.isApprox(Mat::Constant(2, 2, 2.0)));
}

TEST(Autodiff, RewindDropsNodes) {
    ParameterStore<double> ps;
    ps.add("w", Mat::Ones(1, 3));
    Tape<double> t(false);
    const Var w = t.parameter(ps[0]);
    const auto m = t.mark();
    exp(t, w);
    EXPECT_GT(t.size(), m);
    t.rewind(m);
    EXPECT_EQ(t.size(), m);
    EXPECT_EQ(t.parameter(ps[0]).id, w.id);
}

TEST(Autodiff, DropoutScalesKeptEntries) {
    Rng rng(10);
    Tape<double> t(false);
    const Mat x = Mat::Ones(200, 50);
    const Mat y = t.value(dropout(t, t.constant(x), 0.2, rng));
    int zeros = 0;
    for (Eigen::Index i = 0; i < y.size(); ++i) {
        if (y.data()[i] == 0.0) ++zeros;
        else EXPECT_NEAR(y.data()[i], 1.25, 1e-12);
    }
    EXPECT_NEAR(zeros / 10000.0, 0.2, 0.02);
}

TEST(Autodiff, ShapeMismatchThrows) {
    Tape<double> t(false);
    EXPECT_THROW(matmul(t, t.constant(Mat::Ones(2, 3)), t.constant(Mat::Ones(2, 3))), ContractError);
    EXPECT_THROW(softmax_attention(t, t.constant(Mat::Ones(2, 3)), t.constant(Mat::Ones(2, 3)), t.constant(Mat::Ones(2, 3)), 2), ContractError);
}
