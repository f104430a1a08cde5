#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "crossgen/rng.hpp"
#include "crossgen/tensor.hpp"

using namespace crossgen;
namespace fs = std::filesystem;

TEST_CASE("tensor basics") {
    Tensor t = Tensor::from_values({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(t.numel() == 6);
    CHECK(t.at(1, 2) == 6);
    CHECK(t.sum() == doctest::Approx(21));
    CHECK(t.mean() == doctest::Approx(3.5));

    Tensor alias = t;
    alias[0] = 99;
    CHECK(t[0] == 99);  // shared storage

    Tensor deep = t.clone();
    deep[0] = 1;
    CHECK(t[0] == 99);

    Tensor r = t.reshaped({3, 2});
    CHECK(r.at(2, 1) == 6);
    CHECK_THROWS_AS((void)t.reshaped({4, 2}), std::invalid_argument);
}

TEST_CASE("rng determinism and moments") {
    Rng a(42), b(42), c(43);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    CHECK(a.next_u64() != c.next_u64());

    Rng r(7);
    double mean = 0, m2 = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        double x = r.normal();
        mean += x;
        m2 += x * x;
    }
    mean /= n;
    m2 /= n;
    CHECK(std::fabs(mean) < 0.03);
    CHECK(std::fabs(m2 - 1.0) < 0.05);
}

TEST_CASE("seed derivation separates streams") {
    CHECK(derive_seed(1, "a") != derive_seed(1, "b"));
    CHECK(derive_seed(1, "a", 0) != derive_seed(1, "a", 1));
    CHECK(derive_seed(1, "a", 2, 3) == derive_seed(1, "a", 2, 3));
    CHECK(derive_seed(1, "a", 2, 3) != derive_seed(2, "a", 2, 3));
}

TEST_CASE("tensor file round trip") {
    fs::path dir = fs::temp_directory_path() / "crossgen_tensor_test";
    fs::create_directories(dir);
    Rng rng(5);
    Tensor t = Tensor::randn({3, 4, 5}, rng);
    std::string path = (dir / "t.ten").string();
    save_tensor(path, t);
    Tensor u = load_tensor(path);
    CHECK(u.shape() == t.shape());
    // float32 on disk: round trip is exact after the first quantization
    save_tensor(path, u);
    Tensor v = load_tensor(path);
    CHECK(max_abs_diff(u, v) == 0.0);
    CHECK(max_abs_diff(t, u) < 1e-6);
    fs::remove_all(dir);
}

TEST_CASE("bmp and pgm writers emit valid headers") {
    fs::path dir = fs::temp_directory_path() / "crossgen_img_test";
    fs::create_directories(dir);
    Tensor gray = Tensor::full({8, 8}, 0.25);
    save_pgm16((dir / "g.pgm").string(), gray, 0.0, 1.0);
    Tensor rgb = Tensor::zeros({3, 4, 6});
    save_bmp((dir / "c.bmp").string(), rgb);

    std::ifstream pgm(dir / "g.pgm", std::ios::binary);
    std::string magic;
    pgm >> magic;
    CHECK(magic == "P5");
    std::ifstream bmp(dir / "c.bmp", std::ios::binary);
    char bm[2];
    bmp.read(bm, 2);
    CHECK(bm[0] == 'B');
    CHECK(bm[1] == 'M');
    fs::remove_all(dir);
}
