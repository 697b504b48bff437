#pragma once

#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dq {

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

inline std::string strfmt(const char* fmt, ...) {
    va_list args;
    va_start(args, fmt);
    va_list args2;
    va_copy(args2, args);
    int n = std::vsnprintf(nullptr, 0, fmt, args);
    va_end(args);
    std::string s(n > 0 ? static_cast<size_t>(n) : 0, '\0');
    if (n > 0) std::vsnprintf(s.data(), s.size() + 1, fmt, args2);
    va_end(args2);
    return s;
}

inline void check(bool ok, const std::string& msg) {
    if (!ok) throw Error(msg);
}

// FNV-1a, the project-wide fingerprint for artifacts and compatibility checks.
struct Fingerprint {
    uint64_t h = 14695981039346656037ull;

    void update(const void* data, size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (size_t i = 0; i < n; ++i) {
            h ^= p[i];
            h *= 1099511628211ull;
        }
    }
    void update_u64(uint64_t v) { update(&v, sizeof v); }
    void update_str(const std::string& s) {
        update_u64(s.size());
        update(s.data(), s.size());
    }
    template <typename T>
    void update_vec(const std::vector<T>& v) {
        update_u64(v.size());
        if (!v.empty()) update(v.data(), v.size() * sizeof(T));
    }
    uint64_t value() const { return h; }
};

inline std::string hex64(uint64_t v) { return strfmt("%016llx", static_cast<unsigned long long>(v)); }

// Little-endian binary IO. The host is little-endian; writers memcpy raw bytes
// and readers validate magic/fingerprint, so files are self-checking.
struct BinWriter {
    std::ofstream os;
    Fingerprint fp;

    explicit BinWriter(const std::string& path) : os(path, std::ios::binary) {
        check(os.good(), "cannot open for write: " + path);
    }
    void raw(const void* p, size_t n) {
        os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
        fp.update(p, n);
    }
    void u8(uint8_t v) { raw(&v, 1); }
    void u16(uint16_t v) { raw(&v, 2); }
    void u32(uint32_t v) { raw(&v, 4); }
    void u64(uint64_t v) { raw(&v, 8); }
    void i32(int32_t v) { raw(&v, 4); }
    void f32(float v) { raw(&v, 4); }
    void f64(double v) { raw(&v, 8); }
    void str(const std::string& s) {
        check(s.size() < 65536, "string too long for wire format");
        u16(static_cast<uint16_t>(s.size()));
        raw(s.data(), s.size());
    }
    void f32s(const std::vector<float>& v) {
        u64(v.size());
        if (!v.empty()) raw(v.data(), v.size() * 4);
    }
    // Writes the running fingerprint as the final 8 bytes (not folded into itself).
    void finish_with_fingerprint() {
        uint64_t v = fp.value();
        os.write(reinterpret_cast<const char*>(&v), 8);
        os.close();
        check(os.good(), "write failed while closing");
    }
    void close_plain() {
        os.close();
        check(os.good(), "write failed while closing");
    }
};

struct BinReader {
    std::ifstream is;
    Fingerprint fp;
    std::string path;

    explicit BinReader(const std::string& p) : is(p, std::ios::binary), path(p) {
        check(is.good(), "cannot open: " + p);
    }
    void raw(void* p, size_t n) {
        is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        check(is.gcount() == static_cast<std::streamsize>(n), "truncated file: " + path);
        fp.update(p, n);
    }
    uint8_t u8() { uint8_t v; raw(&v, 1); return v; }
    uint16_t u16() { uint16_t v; raw(&v, 2); return v; }
    uint32_t u32() { uint32_t v; raw(&v, 4); return v; }
    uint64_t u64() { uint64_t v; raw(&v, 8); return v; }
    int32_t i32() { int32_t v; raw(&v, 4); return v; }
    float f32() { float v; raw(&v, 4); return v; }
    double f64() { double v; raw(&v, 8); return v; }
    std::string str() {
        uint16_t n = u16();
        std::string s(n, '\0');
        if (n) raw(s.data(), n);
        return s;
    }
    std::vector<float> f32s() {
        uint64_t n = u64();
        std::vector<float> v(n);
        if (n) raw(v.data(), n * 4);
        return v;
    }
    void expect_magic(const char* magic8) {
        char buf[8];
        raw(buf, 8);
        check(std::memcmp(buf, magic8, 8) == 0,
              strfmt("bad magic in %s (want %.8s)", path.c_str(), magic8));
    }
    // Reads the trailing fingerprint and verifies it matches everything before it.
    void verify_fingerprint() {
        uint64_t expect = fp.value();
        uint64_t stored;
        is.read(reinterpret_cast<char*>(&stored), 8);
        check(is.gcount() == 8, "truncated file: " + path);
        check(stored == expect, "fingerprint mismatch (corrupt or edited file): " + path);
    }
};

inline bool file_exists(const std::string& path) {
    std::ifstream f(path);
    return f.good();
}

inline void require_artifact(const std::string& path, const std::string& producer) {
    check(file_exists(path),
          "missing dependency: " + path + " (run `" + producer + "` first)");
}

inline void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    check(f.good(), "cannot open for write: " + path);
    f << text;
    f.close();
    check(f.good(), "write failed: " + path);
}

inline std::string read_text_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    check(f.good(), "cannot open: " + path);
    std::string s((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return s;
}

// Test-only instrumentation counters (single writer thread per counter).
namespace instr {
inline uint64_t& reverse_step_calls() {
    static uint64_t n = 0;
    return n;
}
}  // namespace instr

}  // namespace dq
