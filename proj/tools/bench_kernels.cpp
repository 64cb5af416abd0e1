// Times the OpenMP kernels against their serial reference implementations
// and checks that both produce bit-identical results. Build with
// -DCMAKE_BUILD_TYPE=Release; run with OMP_NUM_THREADS set to taste.

#include <chrono>
#include <cstdio>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "gabliteration/directions.hpp"
#include "gabliteration/kernels.hpp"
#include "gabliteration/linalg.hpp"
#include "gabliteration/rng.hpp"

using namespace gabl;
using Clock = std::chrono::steady_clock;

namespace {

Matrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
    rng::Rng rng(seed);
    Matrix m(rows, cols);
    for (double& x : m.data) x = rng.normal();
    return m;
}

template <typename F>
double time_best_of(std::size_t runs, F&& fn) {
    double best = 1e300;
    for (std::size_t r = 0; r < runs; ++r) {
        const auto start = Clock::now();
        fn();
        best = std::min(best, std::chrono::duration<double>(Clock::now() - start).count());
    }
    return best;
}

}  // namespace

int main() {
#ifdef _OPENMP
    std::printf("OpenMP threads: %d\n", omp_get_max_threads());
#else
    std::printf("built without OpenMP\n");
#endif

    std::printf("\n%-28s %12s %12s %9s %10s\n", "kernel", "serial_s", "parallel_s", "speedup",
                "bitwise");

    for (std::size_t n : {128, 256, 512}) {
        const Matrix a = random_matrix(n, n, 11 + n);
        const Matrix b = random_matrix(n, n, 22 + n);
        Matrix serial_out, parallel_out;
        const double ts = time_best_of(3, [&] { serial_out = kernels::matmul_serial(a, b); });
        const double tp = time_best_of(3, [&] { parallel_out = kernels::matmul(a, b); });
        std::printf("matmul %4zux%-4zu %16.6f %12.6f %8.2fx %10s\n", n, n, ts, tp, ts / tp,
                    serial_out == parallel_out ? "match" : "MISMATCH");
    }

    for (std::size_t d : {128, 256, 512}) {
        const std::size_t rows = 2048, k = 2;
        const Matrix w = random_matrix(rows, d, 33 + d);
        dirs::DirectionSet basis;
        basis.basis = random_matrix(d, k, 44 + d);
        const auto proj = dirs::build_ridge_projection(basis, 0.1);
        Matrix out;
        const double t = time_best_of(3, [&] { out = dirs::apply_projection_right(w, proj); });
        std::printf("project %4zu rows, d=%-4zu %10.6f s (factored apply)\n", rows, d, t);
    }

    for (std::size_t n : {64, 128}) {
        const Matrix a = random_matrix(n, n / 2, 55 + n);
        const double t = time_best_of(3, [&] { (void)linalg::svd_thin(a); });
        std::printf("svd_thin %4zux%-4zu %14.6f s\n", n, n / 2, t);
    }
    return 0;
}
