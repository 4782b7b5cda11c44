#include "spda/tensor.hpp"

#include <cmath>
#include <sstream>

#include "spda/errors.hpp"

namespace spda {

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << "x";
        os << s[i];
    }
    os << "]";
    return os.str();
}

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) {
        if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(s));
        n *= d;
    }
    return n;
}

Tensor::Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (static_cast<int64_t>(data.size()) != shape_numel(shape)) {
        throw ShapeError("tensor data size " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
    }
}

Tensor Tensor::full(Shape s, double v) {
    Tensor t(std::move(s));
    for (auto& x : t.data) x = v;
    return t;
}

Tensor Tensor::scalar(double v) {
    Tensor t(Shape{1});
    t.data[0] = v;
    return t;
}

Tensor Tensor::from(Shape s, std::initializer_list<double> vals) {
    return Tensor(std::move(s), std::vector<double>(vals));
}

bool Tensor::all_finite() const {
    for (double v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

double Tensor::max_abs() const {
    double m = 0.0;
    for (double v : data) m = std::max(m, std::fabs(v));
    return m;
}

void Rng::reseed(uint64_t seed) {
    state = seed;
    have_cached_ = false;
    // warm up splitmix so small seeds diverge immediately
    next_u64();
    next_u64();
}

uint64_t Rng::next_u64() {
    // splitmix64
    state += 0x9e3779b97f4a7c15ull;
    uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

double Rng::uniform() {
    return static_cast<double>(next_u64() >> 11) * (1.0 / 9007199254740992.0);
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

int Rng::uniform_int(int lo, int hi) {
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(next_u64() % span);
}

double Rng::normal(double mean, double stddev) {
    if (have_cached_) {
        have_cached_ = false;
        return mean + stddev * cached_;
    }
    double u1 = 0.0;
    do {
        u1 = uniform();
    } while (u1 <= 1e-300);
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double z0 = r * std::cos(2.0 * M_PI * u2);
    cached_ = r * std::sin(2.0 * M_PI * u2);
    have_cached_ = true;
    return mean + stddev * z0;
}

Rng Rng::fork(uint64_t salt) {
    return Rng(next_u64() ^ (salt * 0x9e3779b97f4a7c15ull));
}

void fill_normal(Tensor& t, Rng& rng, double mean, double stddev) {
    for (auto& v : t.data) v = rng.normal(mean, stddev);
}

void fill_uniform(Tensor& t, Rng& rng, double lo, double hi) {
    for (auto& v : t.data) v = rng.uniform(lo, hi);
}

}  // namespace spda
