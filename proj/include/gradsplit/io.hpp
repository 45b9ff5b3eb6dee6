#pragma once
// Little-endian binary IO and content hashing for artifact files.
// All on-disk formats write through these helpers so byte layout is uniform
// across hosts (this code assumes a little-endian target and asserts it).

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>
#include <filesystem>

namespace gradsplit {

static_assert(std::endian::native == std::endian::little,
              "artifact formats are little-endian");

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

class ByteWriter {
  public:
    void u8(uint8_t v) { buf_.push_back(char(v)); }
    void u16(uint16_t v) { raw(&v, 2); }
    void u32(uint32_t v) { raw(&v, 4); }
    void u64(uint64_t v) { raw(&v, 8); }
    void f32(float v) { raw(&v, 4); }
    void f64(double v) { raw(&v, 8); }
    void raw(const void* p, size_t n) {
        const char* c = static_cast<const char*>(p);
        buf_.insert(buf_.end(), c, c + n);
    }
    void str16(const std::string& s) {
        if (s.size() > 0xffff) throw IoError("string too long for u16 length");
        u16(uint16_t(s.size()));
        raw(s.data(), s.size());
    }
    const std::string& bytes() const { return buf_; }

    void save(const std::string& path) const {
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot open for write: " + path);
        f.write(buf_.data(), std::streamsize(buf_.size()));
        if (!f) throw IoError("write failed: " + path);
    }

  private:
    std::string buf_;
};

class ByteReader {
  public:
    explicit ByteReader(std::string bytes) : buf_(std::move(bytes)) {}

    static ByteReader load(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw IoError("cannot open: " + path);
        std::ostringstream ss;
        ss << f.rdbuf();
        return ByteReader(ss.str());
    }

    uint8_t u8() { uint8_t v; raw(&v, 1); return v; }
    uint16_t u16() { uint16_t v; raw(&v, 2); return v; }
    uint32_t u32() { uint32_t v; raw(&v, 4); return v; }
    uint64_t u64() { uint64_t v; raw(&v, 8); return v; }
    float f32() { float v; raw(&v, 4); return v; }
    double f64() { double v; raw(&v, 8); return v; }
    void raw(void* p, size_t n) {
        if (pos_ + n > buf_.size()) throw IoError("truncated file (read past end)");
        std::memcpy(p, buf_.data() + pos_, n);
        pos_ += n;
    }
    std::string str16() {
        uint16_t n = u16();
        std::string s(n, '\0');
        raw(s.data(), n);
        return s;
    }
    bool done() const { return pos_ == buf_.size(); }
    size_t remaining() const { return buf_.size() - pos_; }

  private:
    std::string buf_;
    size_t pos_ = 0;
};

// FNV-1a 64 over raw bytes; used for artifact identity in manifests and for
// replay gating. Not cryptographic, but collision-safe enough for a local
// pipeline and fully deterministic.
inline uint64_t fnv1a(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) { h ^= p[i]; h *= 0x100000001b3ull; }
    return h;
}

inline std::string hash_hex(uint64_t h) {
    char out[17];
    std::snprintf(out, sizeof out, "%016llx", static_cast<unsigned long long>(h));
    return std::string(out, 16);
}

inline std::string file_hash_hex(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for hash: " + path);
    uint64_t h = 0xcbf29ce484222325ull;
    char chunk[1 << 16];
    while (f.read(chunk, sizeof chunk) || f.gcount() > 0)
        h = fnv1a(chunk, size_t(f.gcount()), h);
    return hash_hex(h);
}

inline void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for write: " + path);
    f << text;
    if (!f) throw IoError("write failed: " + path);
}

inline std::string read_text_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

}  // namespace gradsplit
