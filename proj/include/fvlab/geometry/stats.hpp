#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace fvlab {

// Regularized incomplete beta I_x(a, b), continued fraction (modified Lentz).
double incomplete_beta(double a, double b, double x);
double student_t_cdf(double t, double df);
double student_t_two_sided_p(double t, double df);

struct CorrelationReport {
    std::string scope = "pooled";  // "pooled" or a task name
    double r = 0.0;
    double p = 1.0;
    int n = 0;
    bool defined = true;  // false when a side had zero variance
};

// Two-sided p from t = r * sqrt((n - 2) / (1 - r^2)). Degenerate-input error
// for n < 3 or a constant side.
CorrelationReport pearson(std::span<const double> xs, std::span<const double> ys);

// Dense row-major matrix, just enough for small least-squares problems.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}
    double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
};

// Householder QR least squares.
class LeastSquares {
public:
    explicit LeastSquares(const Matrix& X);

    std::size_t rank() const { return rank_; }
    bool full_rank() const { return rank_ == cols_; }
    std::vector<double> coefficients(std::span<const double> y) const;
    // y minus its projection onto the column space.
    std::vector<double> residuals(std::span<const double> y) const;

private:
    struct Reflector {
        std::size_t start;      // first row the reflector touches
        std::vector<double> v;  // unit Householder vector on rows start..
    };

    void apply_qt(std::vector<double>& y) const;
    void apply_q(std::vector<double>& y) const;

    std::size_t rows_, cols_;
    std::size_t rank_ = 0;
    std::vector<Reflector> reflectors_;
    Matrix r_;  // rank x cols, upper trapezoidal
    std::vector<std::size_t> pivot_cols_;  // column kept at each reflector
};

double r_squared(std::span<const double> y, std::span<const double> residuals);

struct RegressionReport {
    double r2_task = 0.0;
    double r2_task_plus_cos = 0.0;
    double delta_r2 = 0.0;
    double cos_coef = 0.0;
    bool cos_coef_defined = true;  // false when cosine adds no column-space direction
    bool r2_defined = true;        // false when accuracy is constant
    int n = 0;
    int n_tasks = 0;
};

// Accuracy on intercept + (k - 1) task dummies, then the same plus cosine.
// The second fit is computed from the first by partialling cosine out of
// the task design, so r2_task_plus_cos >= r2_task holds exactly.
RegressionReport hierarchical_regression(std::span<const std::string> task, std::span<const double> cosine,
                                         std::span<const double> accuracy);

struct DissociationThresholds {
    double cosine = 0.80;
    double accuracy = 0.40;
};

bool is_dissociation(double cosine, double accuracy, DissociationThresholds t = {});
double dissociation_rate(std::span<const double> cosine, std::span<const double> accuracy,
                         DissociationThresholds t = {});

struct PermutationResult {
    double observed = 0.0;
    double p = 1.0;
    int n_shuffles = 0;
};

// Null: accuracy shuffled against cosine within each task.
// p = (1 + #{null >= observed}) / (1 + n_shuffles).
PermutationResult permutation_test(std::span<const std::string> task, std::span<const double> cosine,
                                   std::span<const double> accuracy, int n_shuffles, std::uint64_t seed,
                                   DissociationThresholds t = {});

// Every within-task arrangement of accuracy, identity included;
// p = #{stat >= observed} / #arrangements. Parameter error above `limit`.
PermutationResult permutation_test_exact(std::span<const std::string> task, std::span<const double> cosine,
                                         std::span<const double> accuracy, DissociationThresholds t = {},
                                         std::uint64_t limit = 1'000'000);

struct WelchResult {
    double mean_a = 0.0;
    double mean_b = 0.0;
    double t = 0.0;
    double df = 0.0;
    double p = 1.0;
    int n_a = 0;
    int n_b = 0;
};

WelchResult welch_t_test(std::span<const double> a, std::span<const double> b);

struct PcaResult {
    double pc1_fraction = 1.0;
    bool degenerate = false;
    std::vector<double> eigenvalues;  // descending, of the centered scatter
};

// Rows are observations. Singular values of the centered matrix via
// one-sided Jacobi rotations.
PcaResult pc1_fraction(const std::vector<std::vector<double>>& rows);

double bonferroni(double alpha, int m);

// Kolmogorov-Smirnov distance between the empirical CDF of `ps` and U(0, 1).
double ks_uniform(std::vector<double> ps);

double mean(std::span<const double> v);

}  // namespace fvlab
