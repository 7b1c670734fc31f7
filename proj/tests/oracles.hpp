#pragma once

// Independent recomputations used as test oracles. Nothing here shares code
// with the library under test.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/distributions/students_t.hpp>

namespace oracle {

using Real = long double;

inline double pearson_r(const std::vector<double>& x, const std::vector<double>& y) {
    const Real n = static_cast<Real>(x.size());
    Real sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sx += x[i];
        sy += y[i];
        sxx += static_cast<Real>(x[i]) * x[i];
        syy += static_cast<Real>(y[i]) * y[i];
        sxy += static_cast<Real>(x[i]) * y[i];
    }
    return static_cast<double>((n * sxy - sx * sy) / std::sqrt((n * sxx - sx * sx) * (n * syy - sy * sy)));
}

inline double t_two_sided_p(double t, double df) {
    boost::math::students_t dist(df);
    return 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
}

inline double pearson_p(double r, std::size_t n) {
    const double df = static_cast<double>(n) - 2.0;
    return t_two_sided_p(r * std::sqrt(df / (1.0 - r * r)), df);
}

// R^2 of y on X solved through the normal equations.
inline double r2_normal_equations(const Eigen::MatrixXd& X, const Eigen::VectorXd& y) {
    using M = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic>;
    using V = Eigen::Matrix<Real, Eigen::Dynamic, 1>;
    const M Xl = X.cast<Real>();
    const V yl = y.cast<Real>();
    const V beta = (Xl.transpose() * Xl).ldlt().solve(Xl.transpose() * yl);
    const V res = yl - Xl * beta;
    const Real mean = yl.mean();
    const Real tss = (yl.array() - mean).square().sum();
    return static_cast<double>(1 - res.squaredNorm() / tss);
}

struct TaskDesign {
    Eigen::MatrixXd task_only;
    Eigen::MatrixXd with_cosine;
};

inline TaskDesign task_design(const std::vector<std::string>& task, const std::vector<double>& cosine) {
    std::map<std::string, int> level;
    for (const auto& t : task) level.emplace(t, 0);
    int k = 0;
    for (auto& [name, idx] : level) idx = k++;
    const auto n = static_cast<Eigen::Index>(task.size());
    TaskDesign d{Eigen::MatrixXd::Zero(n, k), Eigen::MatrixXd::Zero(n, k + 1)};
    for (Eigen::Index i = 0; i < n; ++i) {
        const int l = level[task[static_cast<std::size_t>(i)]];
        d.task_only(i, 0) = d.with_cosine(i, 0) = 1.0;
        if (l > 0) d.task_only(i, l) = d.with_cosine(i, l) = 1.0;
        d.with_cosine(i, k) = cosine[static_cast<std::size_t>(i)];
    }
    return d;
}

struct Welch {
    double t;
    double df;
    double p;
};

inline Welch welch(const std::vector<double>& a, const std::vector<double>& b) {
    auto stats = [](const std::vector<double>& v) {
        Real m = 0;
        for (double x : v) m += x;
        m /= v.size();
        Real s = 0;
        for (double x : v) s += (x - m) * (x - m);
        return std::pair<Real, Real>{m, s / (v.size() - 1)};
    };
    const auto [ma, va] = stats(a);
    const auto [mb, vb] = stats(b);
    const Real na = a.size(), nb = b.size();
    const Real t = (ma - mb) / std::sqrt(va / na + vb / nb);
    const Real df = (va / na + vb / nb) * (va / na + vb / nb) /
                    ((va / na) * (va / na) / (na - 1) + (vb / nb) * (vb / nb) / (nb - 1));
    return {static_cast<double>(t), static_cast<double>(df), t_two_sided_p(static_cast<double>(t), static_cast<double>(df))};
}

// Largest eigenvalue over the trace of the centered Gram matrix.
inline double pc1_fraction_gram(const std::vector<std::vector<double>>& rows) {
    const auto k = static_cast<Eigen::Index>(rows.size());
    const auto d = static_cast<Eigen::Index>(rows[0].size());
    Eigen::MatrixXd A(k, d);
    for (Eigen::Index i = 0; i < k; ++i)
        for (Eigen::Index j = 0; j < d; ++j) A(i, j) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    A.rowwise() -= A.colwise().mean();
    const Eigen::MatrixXd G = A * A.transpose();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(G);
    return es.eigenvalues().maxCoeff() / es.eigenvalues().sum();
}

// Walks every permutation of all n indices and keeps those that never move a
// value across tasks.
inline double exhaustive_permutation_p(const std::vector<std::string>& task, const std::vector<double>& cosine,
                                       const std::vector<double>& accuracy, double cos_thr = 0.80,
                                       double acc_thr = 0.40) {
    auto count = [&](const std::vector<std::size_t>& perm) {
        int c = 0;
        for (std::size_t i = 0; i < perm.size(); ++i) c += cosine[i] > cos_thr && accuracy[perm[i]] < acc_thr;
        return c;
    };
    std::vector<std::size_t> perm(task.size());
    std::iota(perm.begin(), perm.end(), 0);
    const int observed = count(perm);
    long long kept = 0, at_least = 0;
    do {
        bool ok = true;
        for (std::size_t i = 0; i < perm.size() && ok; ++i) ok = task[perm[i]] == task[i];
        if (!ok) continue;
        ++kept;
        at_least += count(perm) >= observed;
    } while (std::next_permutation(perm.begin(), perm.end()));
    return static_cast<double>(at_least) / static_cast<double>(kept);
}

}  // namespace oracle
