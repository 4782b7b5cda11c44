#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

namespace spda {

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
int64_t shape_numel(const Shape& s);

// Dense row-major double tensor. All model math runs in 64-bit.
struct Tensor {
    Shape shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(std::move(s)), data(static_cast<size_t>(shape_numel(shape)), 0.0) {}
    Tensor(Shape s, std::vector<double> d);

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
    static Tensor full(Shape s, double v);
    static Tensor scalar(double v);
    static Tensor from(Shape s, std::initializer_list<double> vals);

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }

    double* ptr() { return data.data(); }
    const double* ptr() const { return data.data(); }

    double& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

    // Rank-specific accessors; callers are expected to know the layout.
    double& at2(int i, int j) { return data[static_cast<size_t>(i) * shape[1] + j]; }
    double at2(int i, int j) const { return data[static_cast<size_t>(i) * shape[1] + j]; }
    double& at3(int i, int j, int k) {
        return data[(static_cast<size_t>(i) * shape[1] + j) * shape[2] + k];
    }
    double at3(int i, int j, int k) const {
        return data[(static_cast<size_t>(i) * shape[1] + j) * shape[2] + k];
    }
    double& at4(int i, int j, int k, int l) {
        return data[((static_cast<size_t>(i) * shape[1] + j) * shape[2] + k) * shape[3] + l];
    }
    double at4(int i, int j, int k, int l) const {
        return data[((static_cast<size_t>(i) * shape[1] + j) * shape[2] + k) * shape[3] + l];
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
    bool all_finite() const;
    double max_abs() const;
};

// Deterministic RNG used for parameter init, data generation and tests.
// Box-Muller keeps normal() independent of the stdlib implementation.
struct Rng {
    uint64_t state;

    explicit Rng(uint64_t seed = 0) { reseed(seed); }
    void reseed(uint64_t seed);

    uint64_t next_u64();
    double uniform();                       // [0, 1)
    double uniform(double lo, double hi);   // [lo, hi)
    int uniform_int(int lo, int hi);        // [lo, hi] inclusive
    double normal(double mean = 0.0, double stddev = 1.0);
    // Derive an independent stream (for per-component seeding).
    Rng fork(uint64_t salt);

  private:
    bool have_cached_ = false;
    double cached_ = 0.0;
};

void fill_normal(Tensor& t, Rng& rng, double mean, double stddev);
void fill_uniform(Tensor& t, Rng& rng, double lo, double hi);

}  // namespace spda
