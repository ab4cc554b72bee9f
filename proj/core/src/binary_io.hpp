#pragma once

// Little-endian primitives shared by the quantized-tensor and checkpoint encoders.

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "smmini/error.hpp"

namespace smmini::detail {

inline void put_u8(std::ostream& out, std::uint8_t v) {
    out.put(static_cast<char>(v));
}

inline void put_u32(std::ostream& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        out.put(static_cast<char>((v >> (8 * i)) & 0xff));
    }
}

inline void put_u64(std::ostream& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        out.put(static_cast<char>((v >> (8 * i)) & 0xff));
    }
}

inline void put_f64(std::ostream& out, double v) {
    put_u64(out, std::bit_cast<std::uint64_t>(v));
}

inline void put_string(std::ostream& out, const std::string& s) {
    put_u32(out, static_cast<std::uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

class ByteReader {
public:
    ByteReader(std::istream& in, ErrorKind kind) : in_(in), kind_(kind) {}

    std::uint8_t u8() {
        char c = 0;
        if (!in_.get(c)) {
            fail("unexpected end of data");
        }
        return static_cast<std::uint8_t>(c);
    }

    std::uint32_t u32() {
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<std::uint32_t>(u8()) << (8 * i);
        }
        return v;
    }

    std::uint64_t u64() {
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) {
            v |= static_cast<std::uint64_t>(u8()) << (8 * i);
        }
        return v;
    }

    double f64() { return std::bit_cast<double>(u64()); }

    std::string bytes(std::size_t n) {
        check_available(n);
        std::string s(n, '\0');
        if (!in_.read(s.data(), static_cast<std::streamsize>(n))) {
            fail("unexpected end of data");
        }
        return s;
    }

    std::string string() { return bytes(u32()); }

    /// Guards allocations driven by length fields against corrupt input.
    void check_available(std::uint64_t n) {
        const auto here = in_.tellg();
        if (here < 0) {
            return;
        }
        in_.seekg(0, std::ios::end);
        const auto end = in_.tellg();
        in_.seekg(here);
        if (static_cast<std::uint64_t>(end - here) < n) {
            fail("length field exceeds remaining data");
        }
    }

    [[noreturn]] void fail(const std::string& what) { throw Error(kind_, what); }

private:
    std::istream& in_;
    ErrorKind kind_;
};

}  // namespace smmini::detail
