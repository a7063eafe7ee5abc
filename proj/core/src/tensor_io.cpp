#include "transdiff/tensor_io.hpp"

#include <cstring>
#include <fstream>
#include <vector>

namespace transdiff::io {

namespace {

constexpr std::uint8_t kDtypeF32 = 0;
constexpr std::uint8_t kDtypeF64 = 1;

template <class T>
void write_impl(const std::string& path, const Tensor<T>& t, std::uint8_t dtype) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) fail("tensor file: cannot open " + path + " for writing");
    f.write(kTensorMagic, 4);
    f.put(static_cast<char>(dtype));
    f.put(static_cast<char>(t.ndim()));
    for (std::int64_t e : t.shape()) {
        const std::uint64_t v = static_cast<std::uint64_t>(e);
        for (int i = 0; i < 8; ++i) f.put(static_cast<char>((v >> (8 * i)) & 0xffu));
    }
    f.write(reinterpret_cast<const char*>(t.data()),
            static_cast<std::streamsize>(sizeof(T) * static_cast<std::size_t>(t.numel())));
    if (!f) fail("tensor file: write failed for " + path);
}

template <class T>
Tensor<T> read_impl(const std::string& path, std::uint8_t expect_dtype) {
    std::ifstream f(path, std::ios::binary);
    if (!f) fail("tensor file: cannot open " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, kTensorMagic, 4) != 0) fail("tensor file: bad magic in " + path);
    const int dtype = f.get();
    const int ndim = f.get();
    if (dtype != expect_dtype) fail("tensor file: dtype mismatch in " + path);
    if (ndim < 0 || ndim > 8) fail("tensor file: implausible rank in " + path);
    Shape shape;
    for (int k = 0; k < ndim; ++k) {
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) {
            const int b = f.get();
            if (b < 0) fail("tensor file: truncated " + path);
            v |= static_cast<std::uint64_t>(b) << (8 * i);
        }
        shape.push_back(static_cast<std::int64_t>(v));
    }
    Tensor<T> t(shape);
    f.read(reinterpret_cast<char*>(t.data()),
           static_cast<std::streamsize>(sizeof(T) * static_cast<std::size_t>(t.numel())));
    if (!f) fail("tensor file: truncated payload in " + path);
    return t;
}

}  // namespace

void write_tensor_file(const std::string& path, const Tensor<float>& t) {
    write_impl(path, t, kDtypeF32);
}
void write_tensor_file(const std::string& path, const Tensor<double>& t) {
    write_impl(path, t, kDtypeF64);
}
Tensor<float> read_tensor_file_f32(const std::string& path) {
    return read_impl<float>(path, kDtypeF32);
}
Tensor<double> read_tensor_file_f64(const std::string& path) {
    return read_impl<double>(path, kDtypeF64);
}

void write_pgm(const std::string& path, const Tensor<float>& latent, std::int64_t h,
               std::int64_t w) {
    if (latent.rows() != h * w) fail("pgm: latent token count does not match h*w");
    std::vector<double> grey(static_cast<std::size_t>(h * w));
    double lo = 1e300, hi = -1e300;
    for (std::int64_t tok = 0; tok < h * w; ++tok) {
        double acc = 0;
        for (std::int64_t c = 0; c < latent.cols(); ++c) acc += latent.at(tok, c);
        acc /= static_cast<double>(latent.cols());
        grey[static_cast<std::size_t>(tok)] = acc;
        lo = std::min(lo, acc);
        hi = std::max(hi, acc);
    }
    const double range = hi > lo ? hi - lo : 1.0;
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) fail("pgm: cannot open " + path + " for writing");
    f << "P5\n" << w << " " << h << "\n255\n";
    for (double g : grey)
        f.put(static_cast<char>(static_cast<int>(255.0 * (g - lo) / range + 0.5)));
    if (!f) fail("pgm: write failed for " + path);
}

}  // namespace transdiff::io
