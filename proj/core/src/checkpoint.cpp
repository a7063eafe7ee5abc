#include "transdiff/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace transdiff::ckpt {

std::uint32_t crc32(const void* data, std::size_t size, std::uint32_t seed) {
    static const auto table = [] {
        std::array<std::uint32_t, 256> t{};
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    std::uint32_t c = seed ^ 0xffffffffu;
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < size; ++i) c = table[(c ^ p[i]) & 0xffu] ^ (c >> 8);
    return c ^ 0xffffffffu;
}

namespace {

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

void put_bytes(std::string& out, const void* data, std::size_t n) {
    out.append(static_cast<const char*>(data), n);
}

class Reader {
  public:
    Reader(const std::string& buf, std::size_t pos) : buf_(buf), pos_(pos) {}

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
        pos_ += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
        pos_ += 8;
        return v;
    }
    std::string bytes(std::size_t n) {
        need(n);
        std::string s = buf_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    void raw(void* dst, std::size_t n) {
        need(n);
        std::memcpy(dst, buf_.data() + pos_, n);
        pos_ += n;
    }
    std::size_t pos() const { return pos_; }

  private:
    void need(std::size_t n) const {
        if (pos_ + n > buf_.size()) fail("checkpoint: truncated file");
    }
    const std::string& buf_;
    std::size_t pos_;
};

void put_tensor_list(std::string& out, const std::vector<NamedTensor>& list) {
    put_u32(out, static_cast<std::uint32_t>(list.size()));
    for (const auto& nt : list) {
        put_u32(out, static_cast<std::uint32_t>(nt.name.size()));
        put_bytes(out, nt.name.data(), nt.name.size());
        put_u32(out, static_cast<std::uint32_t>(nt.tensor.ndim()));
        for (std::int64_t e : nt.tensor.shape()) put_u64(out, static_cast<std::uint64_t>(e));
        static_assert(sizeof(float) == 4);
        put_bytes(out, nt.tensor.data(), sizeof(float) * static_cast<std::size_t>(nt.tensor.numel()));
    }
}

std::vector<NamedTensor> get_tensor_list(Reader& r) {
    std::vector<NamedTensor> list;
    const std::uint32_t count = r.u32();
    list.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        NamedTensor nt;
        nt.name = r.bytes(r.u32());
        const std::uint32_t ndim = r.u32();
        Shape shape;
        for (std::uint32_t k = 0; k < ndim; ++k) shape.push_back(static_cast<std::int64_t>(r.u64()));
        Tensor<float> t(shape);
        r.raw(t.data(), sizeof(float) * static_cast<std::size_t>(t.numel()));
        nt.tensor = std::move(t);
        list.push_back(std::move(nt));
    }
    return list;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    std::string body;
    put_u32(body, ckpt.version);
    put_u32(body, static_cast<std::uint32_t>(ckpt.config_text.size()));
    put_bytes(body, ckpt.config_text.data(), ckpt.config_text.size());
    put_u64(body, ckpt.step);
    put_tensor_list(body, ckpt.params);
    put_tensor_list(body, ckpt.ema);
    put_tensor_list(body, ckpt.opt);

    std::string out(kMagic, 4);
    out += body;
    put_u32(out, crc32(body.data(), body.size()));

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) fail("checkpoint: cannot open " + path + " for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) fail("checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) fail("checkpoint: cannot open " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    if (buf.size() < 12 || std::memcmp(buf.data(), kMagic, 4) != 0)
        fail("checkpoint: bad magic in " + path);
    const std::size_t body_size = buf.size() - 4 - 4;
    const std::uint32_t stored = [&] {
        Reader tail(buf, buf.size() - 4);
        return tail.u32();
    }();
    if (crc32(buf.data() + 4, body_size) != stored) fail("checkpoint: checksum mismatch");

    Reader r(buf, 4);
    Checkpoint ckpt;
    ckpt.version = r.u32();
    if (ckpt.version != kFormatVersion)
        fail("checkpoint: unsupported format-version " + std::to_string(ckpt.version) +
             " (expected " + std::to_string(kFormatVersion) + ")");
    ckpt.config_text = r.bytes(r.u32());
    ckpt.step = r.u64();
    ckpt.params = get_tensor_list(r);
    ckpt.ema = get_tensor_list(r);
    ckpt.opt = get_tensor_list(r);
    return ckpt;
}

}  // namespace transdiff::ckpt
