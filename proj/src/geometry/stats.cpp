#include "fvlab/geometry/stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include "fvlab/common/error.hpp"
#include "fvlab/common/rng.hpp"

namespace fvlab {

namespace {

double beta_continued_fraction(double a, double b, double x) {
    constexpr int kMaxIter = 10000;
    constexpr double kEps = 1e-16;
    constexpr double kTiny = 1e-300;
    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::abs(d) < kTiny) d = kTiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        const double m2 = 2.0 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < kEps) return h;
    }
    return h;
}

}  // namespace

double incomplete_beta(double a, double b, double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double log_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
    const double front = std::exp(log_front);
    if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_continued_fraction(a, b, x) / a;
    return 1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b;
}

double student_t_two_sided_p(double t, double df) {
    if (std::isnan(t)) return std::numeric_limits<double>::quiet_NaN();
    if (std::isinf(t)) return 0.0;
    return incomplete_beta(0.5 * df, 0.5, df / (df + t * t));
}

double student_t_cdf(double t, double df) {
    const double tail = 0.5 * student_t_two_sided_p(t, df);
    return t > 0.0 ? 1.0 - tail : tail;
}

double mean(std::span<const double> v) {
    if (v.empty()) return 0.0;
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

CorrelationReport pearson(std::span<const double> xs, std::span<const double> ys) {
    if (xs.size() != ys.size()) fail(ErrorKind::parameter, "pearson needs equal-length samples");
    const std::size_t n = xs.size();
    if (n < 3) fail(ErrorKind::degenerate_input, "pearson needs at least 3 points");
    const double mx = mean(xs), my = mean(ys);
    double sxx = 0.0, syy = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double dx = xs[i] - mx, dy = ys[i] - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if (sxx == 0.0 || syy == 0.0) fail(ErrorKind::degenerate_input, "pearson input has zero variance");
    CorrelationReport rep;
    rep.n = static_cast<int>(n);
    rep.r = std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
    if (std::abs(rep.r) == 1.0) {
        rep.p = 0.0;
    } else {
        const double t = rep.r * std::sqrt(static_cast<double>(n - 2) / (1.0 - rep.r * rep.r));
        rep.p = student_t_two_sided_p(t, static_cast<double>(n - 2));
    }
    return rep;
}

LeastSquares::LeastSquares(const Matrix& X) : rows_(X.rows), cols_(X.cols), r_(X.cols, X.cols) {
    Matrix a = X;
    std::vector<double> col_norm(cols_, 0.0);
    for (std::size_t j = 0; j < cols_; ++j)
        for (std::size_t i = 0; i < rows_; ++i) col_norm[j] += a(i, j) * a(i, j);

    std::size_t row = 0;
    for (std::size_t j = 0; j < cols_ && row < rows_; ++j) {
        double ss = 0.0;
        for (std::size_t i = row; i < rows_; ++i) ss += a(i, j) * a(i, j);
        // A column with nothing left outside the span of earlier columns is dependent.
        if (ss <= 1e-20 * col_norm[j] || ss == 0.0) continue;
        const double norm = std::sqrt(ss);
        const double alpha = a(row, j) > 0 ? -norm : norm;
        std::vector<double> v(rows_ - row);
        for (std::size_t i = row; i < rows_; ++i) v[i - row] = a(i, j);
        v[0] -= alpha;
        double vn = 0.0;
        for (double x : v) vn += x * x;
        vn = std::sqrt(vn);
        for (double& x : v) x /= vn;
        for (std::size_t k = j; k < cols_; ++k) {
            double dot = 0.0;
            for (std::size_t i = row; i < rows_; ++i) dot += v[i - row] * a(i, k);
            for (std::size_t i = row; i < rows_; ++i) a(i, k) -= 2.0 * dot * v[i - row];
        }
        for (std::size_t k = 0; k < cols_; ++k) r_(row, k) = a(row, k);
        reflectors_.push_back({row, std::move(v)});
        pivot_cols_.push_back(j);
        ++row;
    }
    rank_ = row;
}

void LeastSquares::apply_qt(std::vector<double>& y) const {
    for (const auto& h : reflectors_) {
        double dot = 0.0;
        for (std::size_t i = h.start; i < rows_; ++i) dot += h.v[i - h.start] * y[i];
        for (std::size_t i = h.start; i < rows_; ++i) y[i] -= 2.0 * dot * h.v[i - h.start];
    }
}

void LeastSquares::apply_q(std::vector<double>& y) const {
    for (auto it = reflectors_.rbegin(); it != reflectors_.rend(); ++it) {
        double dot = 0.0;
        for (std::size_t i = it->start; i < rows_; ++i) dot += it->v[i - it->start] * y[i];
        for (std::size_t i = it->start; i < rows_; ++i) y[i] -= 2.0 * dot * it->v[i - it->start];
    }
}

std::vector<double> LeastSquares::coefficients(std::span<const double> y) const {
    if (!full_rank()) fail(ErrorKind::degenerate_input, "design matrix is rank deficient");
    if (y.size() != rows_) fail(ErrorKind::parameter, "response length mismatch");
    std::vector<double> qty(y.begin(), y.end());
    apply_qt(qty);
    std::vector<double> beta(cols_, 0.0);
    for (std::size_t k = cols_; k-- > 0;) {
        double s = qty[k];
        for (std::size_t j = k + 1; j < cols_; ++j) s -= r_(k, j) * beta[j];
        beta[k] = s / r_(k, k);
    }
    return beta;
}

std::vector<double> LeastSquares::residuals(std::span<const double> y) const {
    if (y.size() != rows_) fail(ErrorKind::parameter, "response length mismatch");
    std::vector<double> r(y.begin(), y.end());
    apply_qt(r);
    for (std::size_t k = 0; k < rank_; ++k) r[k] = 0.0;
    apply_q(r);
    return r;
}

double r_squared(std::span<const double> y, std::span<const double> residuals) {
    const double my = mean(y);
    double tss = 0.0, rss = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        tss += (y[i] - my) * (y[i] - my);
        rss += residuals[i] * residuals[i];
    }
    return tss == 0.0 ? 0.0 : 1.0 - rss / tss;
}

RegressionReport hierarchical_regression(std::span<const std::string> task, std::span<const double> cosine,
                                         std::span<const double> accuracy) {
    const std::size_t n = task.size();
    if (cosine.size() != n || accuracy.size() != n) fail(ErrorKind::parameter, "regression columns differ in length");
    std::map<std::string, std::size_t> levels;
    for (const auto& t : task) levels.emplace(t, 0);
    std::size_t k = 0;
    for (auto& [name, idx] : levels) idx = k++;
    if (n <= k + 1)
        fail(ErrorKind::degenerate_input, "regression needs more observations (" + std::to_string(n) +
                                              ") than predictors (" + std::to_string(k + 1) + ")");

    Matrix X(n, k);
    for (std::size_t i = 0; i < n; ++i) {
        X(i, 0) = 1.0;
        const std::size_t level = levels[task[i]];
        if (level > 0) X(i, level) = 1.0;
    }
    const LeastSquares ls(X);
    if (!ls.full_rank()) fail(ErrorKind::degenerate_input, "task design is rank deficient");

    const auto ry = ls.residuals(accuracy);
    const auto rc = ls.residuals(cosine);
    const double my = mean(accuracy), mc = mean(cosine);
    double tss = 0.0, rss_task = 0.0, cc = 0.0, cy = 0.0, c_spread = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        tss += (accuracy[i] - my) * (accuracy[i] - my);
        rss_task += ry[i] * ry[i];
        cc += rc[i] * rc[i];
        cy += rc[i] * ry[i];
        c_spread += (cosine[i] - mc) * (cosine[i] - mc);
    }

    RegressionReport rep;
    rep.n = static_cast<int>(n);
    rep.n_tasks = static_cast<int>(k);
    double rss_full = rss_task;
    if (cc <= 1e-20 * c_spread || cc == 0.0) {
        rep.cos_coef_defined = false;
        rep.cos_coef = std::numeric_limits<double>::quiet_NaN();
    } else {
        rep.cos_coef = cy / cc;
        rss_full = std::max(0.0, rss_task - cy * cy / cc);
    }
    if (tss == 0.0) {
        rep.r2_defined = false;
        return rep;
    }
    rep.r2_task = std::max(0.0, 1.0 - rss_task / tss);
    rep.r2_task_plus_cos = std::max(rep.r2_task, 1.0 - rss_full / tss);
    rep.delta_r2 = rep.r2_task_plus_cos - rep.r2_task;
    return rep;
}

bool is_dissociation(double cosine, double accuracy, DissociationThresholds t) {
    return cosine > t.cosine && accuracy < t.accuracy;
}

namespace {

std::size_t dissociation_count(std::span<const double> cosine, std::span<const double> accuracy,
                               DissociationThresholds t) {
    std::size_t c = 0;
    for (std::size_t i = 0; i < cosine.size(); ++i) c += is_dissociation(cosine[i], accuracy[i], t);
    return c;
}

std::vector<std::vector<std::size_t>> groups_of(std::span<const std::string> task) {
    std::map<std::string, std::vector<std::size_t>> g;
    for (std::size_t i = 0; i < task.size(); ++i) g[task[i]].push_back(i);
    std::vector<std::vector<std::size_t>> out;
    for (auto& [name, idx] : g) out.push_back(std::move(idx));
    return out;
}

}  // namespace

double dissociation_rate(std::span<const double> cosine, std::span<const double> accuracy, DissociationThresholds t) {
    if (cosine.empty()) return 0.0;
    return static_cast<double>(dissociation_count(cosine, accuracy, t)) / static_cast<double>(cosine.size());
}

PermutationResult permutation_test(std::span<const std::string> task, std::span<const double> cosine,
                                   std::span<const double> accuracy, int n_shuffles, std::uint64_t seed,
                                   DissociationThresholds t) {
    if (task.size() != cosine.size() || cosine.size() != accuracy.size())
        fail(ErrorKind::parameter, "permutation test columns differ in length");
    if (n_shuffles < 1) fail(ErrorKind::parameter, "n_shuffles must be >= 1");
    const auto groups = groups_of(task);
    const std::size_t observed = dissociation_count(cosine, accuracy, t);
    std::vector<double> shuffled(accuracy.begin(), accuracy.end());
    Rng rng(seed);
    int at_least = 0;
    for (int s = 0; s < n_shuffles; ++s) {
        for (const auto& g : groups) {
            for (std::size_t i = g.size(); i > 1; --i) {
                const std::size_t j = rng.below(i);
                std::swap(shuffled[g[i - 1]], shuffled[g[j]]);
            }
        }
        at_least += dissociation_count(cosine, shuffled, t) >= observed;
    }
    PermutationResult r;
    r.observed = cosine.empty() ? 0.0 : static_cast<double>(observed) / static_cast<double>(cosine.size());
    r.n_shuffles = n_shuffles;
    r.p = (1.0 + at_least) / (1.0 + n_shuffles);
    return r;
}

PermutationResult permutation_test_exact(std::span<const std::string> task, std::span<const double> cosine,
                                         std::span<const double> accuracy, DissociationThresholds t,
                                         std::uint64_t limit) {
    if (task.size() != cosine.size() || cosine.size() != accuracy.size())
        fail(ErrorKind::parameter, "permutation test columns differ in length");
    const auto groups = groups_of(task);
    std::uint64_t total = 1;
    for (const auto& g : groups)
        for (std::size_t i = 2; i <= g.size(); ++i) {
            total *= i;
            if (total > limit) fail(ErrorKind::parameter, "too many arrangements for an exact permutation test");
        }
    const std::size_t observed = dissociation_count(cosine, accuracy, t);
    std::vector<std::vector<std::size_t>> order(groups.size());
    for (std::size_t g = 0; g < groups.size(); ++g) order[g] = groups[g];
    std::vector<double> arranged(accuracy.size());
    std::uint64_t at_least = 0, seen = 0;
    // Odometer over the groups' permutations.
    for (;;) {
        for (std::size_t g = 0; g < groups.size(); ++g)
            for (std::size_t i = 0; i < groups[g].size(); ++i) arranged[groups[g][i]] = accuracy[order[g][i]];
        at_least += dissociation_count(cosine, arranged, t) >= observed;
        ++seen;
        std::size_t g = 0;
        while (g < groups.size() && !std::next_permutation(order[g].begin(), order[g].end())) ++g;
        if (g == groups.size()) break;
    }
    PermutationResult r;
    r.observed = cosine.empty() ? 0.0 : static_cast<double>(observed) / static_cast<double>(cosine.size());
    r.n_shuffles = static_cast<int>(seen);
    r.p = static_cast<double>(at_least) / static_cast<double>(seen);
    return r;
}

WelchResult welch_t_test(std::span<const double> a, std::span<const double> b) {
    if (a.empty() || b.empty()) fail(ErrorKind::parameter, "both groups must be nonempty");
    if (a.size() < 2 || b.size() < 2) fail(ErrorKind::degenerate_input, "Welch test needs two observations per group");
    WelchResult w;
    w.n_a = static_cast<int>(a.size());
    w.n_b = static_cast<int>(b.size());
    w.mean_a = mean(a);
    w.mean_b = mean(b);
    auto var = [](std::span<const double> v, double m) {
        double s = 0.0;
        for (double x : v) s += (x - m) * (x - m);
        return s / static_cast<double>(v.size() - 1);
    };
    const double qa = var(a, w.mean_a) / w.n_a, qb = var(b, w.mean_b) / w.n_b;
    const double se2 = qa + qb;
    const double diff = w.mean_a - w.mean_b;
    if (se2 == 0.0) {
        if (diff != 0.0) fail(ErrorKind::degenerate_input, "both groups are constant with different means");
        w.t = 0.0;
        w.df = static_cast<double>(w.n_a + w.n_b - 2);
        w.p = 1.0;
        return w;
    }
    w.t = diff / std::sqrt(se2);
    w.df = se2 * se2 / (qa * qa / (w.n_a - 1) + qb * qb / (w.n_b - 1));
    w.p = student_t_two_sided_p(w.t, w.df);
    return w;
}

PcaResult pc1_fraction(const std::vector<std::vector<double>>& rows) {
    if (rows.size() < 2) fail(ErrorKind::parameter, "PCA needs at least two vectors");
    const std::size_t k = rows.size(), d = rows[0].size();
    std::vector<double> mu(d, 0.0);
    double raw = 0.0;
    for (const auto& r : rows) {
        if (r.size() != d) fail(ErrorKind::parameter, "PCA vectors differ in length");
        for (std::size_t i = 0; i < d; ++i) {
            mu[i] += r[i] / static_cast<double>(k);
            raw += r[i] * r[i];
        }
    }
    std::vector<std::vector<double>> a(k, std::vector<double>(d));
    for (std::size_t j = 0; j < k; ++j)
        for (std::size_t i = 0; i < d; ++i) a[j][i] = rows[j][i] - mu[i];

    auto dot = [&](std::size_t p, std::size_t q) {
        double s = 0.0;
        for (std::size_t i = 0; i < d; ++i) s += a[p][i] * a[q][i];
        return s;
    };
    for (int sweep = 0; sweep < 100; ++sweep) {
        bool rotated = false;
        for (std::size_t p = 0; p + 1 < k; ++p) {
            for (std::size_t q = p + 1; q < k; ++q) {
                const double alpha = dot(p, p), beta = dot(q, q), gamma = dot(p, q);
                if (gamma == 0.0 || std::abs(gamma) <= 1e-15 * std::sqrt(alpha * beta)) continue;
                rotated = true;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = (zeta >= 0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t), s = c * t;
                for (std::size_t i = 0; i < d; ++i) {
                    const double x = a[p][i], y = a[q][i];
                    a[p][i] = c * x - s * y;
                    a[q][i] = s * x + c * y;
                }
            }
        }
        if (!rotated) break;
    }
    PcaResult res;
    double total = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
        res.eigenvalues.push_back(dot(j, j) / static_cast<double>(k - 1));
        total += res.eigenvalues.back();
    }
    std::sort(res.eigenvalues.begin(), res.eigenvalues.end(), std::greater<>());
    if (total <= 1e-24 * raw || total == 0.0) {
        res.degenerate = true;
        res.pc1_fraction = 1.0;
        return res;
    }
    res.pc1_fraction = std::min(1.0, res.eigenvalues.front() / total);
    return res;
}

double bonferroni(double alpha, int m) {
    if (m < 1) fail(ErrorKind::parameter, "Bonferroni family size must be >= 1");
    return alpha / m;
}

double ks_uniform(std::vector<double> ps) {
    if (ps.empty()) fail(ErrorKind::parameter, "KS distance needs samples");
    std::sort(ps.begin(), ps.end());
    const double n = static_cast<double>(ps.size());
    double d = 0.0;
    for (std::size_t i = 0; i < ps.size(); ++i) {
        const double u = std::clamp(ps[i], 0.0, 1.0);
        d = std::max({d, (i + 1) / n - u, u - i / n});
    }
    return d;
}

}  // namespace fvlab
