#include "crossgen/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>

#include <nlohmann/json.hpp>

namespace crossgen {

using json = nlohmann::json;
namespace fs = std::filesystem;

double Tensor::min() const {
    double m = (*buf_)[0];
    for (double x : *buf_) m = std::min(m, x);
    return m;
}

double Tensor::max() const {
    double m = (*buf_)[0];
    for (double x : *buf_) m = std::max(m, x);
    return m;
}

double Tensor::sum() const {
    double s = 0;
    for (double x : *buf_) s += x;
    return s;
}

double Tensor::mean() const { return sum() / double(numel()); }

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ")";
    return os.str();
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    require(a.same_shape(b), "max_abs_diff: shape mismatch");
    double m = 0;
    for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
    return m;
}

void save_tensor(const std::string& path, const Tensor& t) {
    json header;
    header["dims"] = t.shape();
    header["dtype"] = "float32";
    header["layout"] = "row-major";
    std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        require(out.good(), "save_tensor: cannot open " + tmp);
        out << header.dump() << "\n";
        std::vector<float> buf(size_t(t.numel()));
        for (int64_t i = 0; i < t.numel(); ++i) buf[size_t(i)] = float(t[i]);
        out.write(reinterpret_cast<const char*>(buf.data()),
                  std::streamsize(buf.size() * sizeof(float)));
        require(out.good(), "save_tensor: write failed for " + tmp);
    }
    fs::rename(tmp, path);
}

namespace {
TensorLoadHook g_load_hook;
std::mutex g_load_hook_mu;
}  // namespace

void set_tensor_load_hook(TensorLoadHook hook) {
    std::lock_guard<std::mutex> lock(g_load_hook_mu);
    g_load_hook = std::move(hook);
}

Tensor load_tensor(const std::string& path) {
    {
        std::lock_guard<std::mutex> lock(g_load_hook_mu);
        if (g_load_hook) g_load_hook(path);
    }
    std::ifstream in(path, std::ios::binary);
    require(in.good(), "load_tensor: cannot open " + path);
    std::string line;
    std::getline(in, line);
    json header = json::parse(line);
    require(header.at("dtype") == "float32", "load_tensor: unsupported dtype in " + path);
    require(header.at("layout") == "row-major", "load_tensor: unsupported layout in " + path);
    std::vector<int> dims = header.at("dims").get<std::vector<int>>();
    Tensor t(dims);
    std::vector<float> buf(size_t(t.numel()));
    in.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size() * sizeof(float)));
    require(in.gcount() == std::streamsize(buf.size() * sizeof(float)),
            "load_tensor: truncated file " + path);
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = double(buf[size_t(i)]);
    return t;
}

void save_pgm16(const std::string& path, const Tensor& image, double lo, double hi) {
    require(image.ndim() == 2 || (image.ndim() == 3 && image.dim(0) == 1),
            "save_pgm16: expected HxW or 1xHxW image");
    int h = image.ndim() == 2 ? image.dim(0) : image.dim(1);
    int w = image.ndim() == 2 ? image.dim(1) : image.dim(2);
    std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        require(out.good(), "save_pgm16: cannot open " + tmp);
        out << "P5\n" << w << " " << h << "\n65535\n";
        for (int64_t i = 0; i < int64_t(h) * w; ++i) {
            double v = (image[i] - lo) / (hi - lo);
            v = std::clamp(v, 0.0, 1.0);
            auto u = uint16_t(std::lround(v * 65535.0));
            unsigned char bytes[2] = {(unsigned char)(u >> 8), (unsigned char)(u & 0xFF)};
            out.write(reinterpret_cast<const char*>(bytes), 2);
        }
    }
    fs::rename(tmp, path);
}

void save_bmp(const std::string& path, const Tensor& rgb) {
    require(rgb.ndim() == 3 && rgb.dim(0) == 3, "save_bmp: expected 3xHxW");
    int h = rgb.dim(1), w = rgb.dim(2);
    int row_bytes = (3 * w + 3) & ~3;
    uint32_t data_size = uint32_t(row_bytes) * uint32_t(h);
    uint32_t file_size = 54 + data_size;

    std::vector<unsigned char> out(file_size, 0);
    auto put32 = [&](size_t off, uint32_t v) {
        out[off] = v & 0xFF;
        out[off + 1] = (v >> 8) & 0xFF;
        out[off + 2] = (v >> 16) & 0xFF;
        out[off + 3] = (v >> 24) & 0xFF;
    };
    out[0] = 'B';
    out[1] = 'M';
    put32(2, file_size);
    put32(10, 54);
    put32(14, 40);
    put32(18, uint32_t(w));
    put32(22, uint32_t(h));
    out[26] = 1;
    out[28] = 24;
    put32(34, data_size);

    for (int y = 0; y < h; ++y) {
        // BMP rows are bottom-up.
        size_t row_off = 54 + size_t(h - 1 - y) * size_t(row_bytes);
        for (int x = 0; x < w; ++x) {
            auto to8 = [&](int c) {
                double v = std::clamp(rgb.at(c, y, x), 0.0, 1.0);
                return (unsigned char)(std::lround(v * 255.0));
            };
            out[row_off + 3 * size_t(x) + 0] = to8(2);
            out[row_off + 3 * size_t(x) + 1] = to8(1);
            out[row_off + 3 * size_t(x) + 2] = to8(0);
        }
    }

    std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary);
        require(f.good(), "save_bmp: cannot open " + tmp);
        f.write(reinterpret_cast<const char*>(out.data()), std::streamsize(out.size()));
    }
    fs::rename(tmp, path);
}

void atomic_write_text(const std::string& path, const std::string& content) {
    std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        require(out.good(), "atomic_write_text: cannot open " + tmp);
        out << content;
        require(out.good(), "atomic_write_text: write failed for " + tmp);
    }
    fs::rename(tmp, path);
}

}  // namespace crossgen
