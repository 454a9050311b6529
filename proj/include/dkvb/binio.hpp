#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>

#include "dkvb/errors.hpp"

namespace dkvb::binio {

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; big-endian hosts are unsupported");

// Binary reader that tracks its byte offset so format errors can say where.
class Reader {
public:
    explicit Reader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
        if (!in_) throw DataError(path + ": cannot open for reading");
    }

    std::uint64_t offset() const { return offset_; }

    void read_raw(void* dst, std::size_t n) {
        in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in_.gcount()) != n) {
            throw DataError(path_ + ": truncated at byte offset " + std::to_string(offset_));
        }
        offset_ += n;
    }

    std::uint32_t read_u32() {
        std::uint32_t v;
        read_raw(&v, sizeof v);
        return v;
    }

    std::uint64_t read_u64() {
        std::uint64_t v;
        read_raw(&v, sizeof v);
        return v;
    }

    float read_f32() {
        float v;
        read_raw(&v, sizeof v);
        return v;
    }

    double read_f64() {
        double v;
        read_raw(&v, sizeof v);
        return v;
    }

    void expect_magic(const char (&magic)[5]) {
        char buf[4];
        std::uint64_t at = offset_;
        read_raw(buf, 4);
        if (std::memcmp(buf, magic, 4) != 0) {
            throw DataError(path_ + ": bad magic at byte offset " + std::to_string(at) +
                            ", expected \"" + magic + "\"");
        }
    }

    bool at_eof() {
        return in_.peek() == std::char_traits<char>::eof();
    }

    const std::string& path() const { return path_; }

private:
    std::string path_;
    std::ifstream in_;
    std::uint64_t offset_ = 0;
};

class Writer {
public:
    explicit Writer(const std::string& path) : path_(path), out_(path, std::ios::binary) {
        if (!out_) throw DataError(path + ": cannot open for writing");
    }

    void write_raw(const void* src, std::size_t n) {
        out_.write(static_cast<const char*>(src), static_cast<std::streamsize>(n));
    }

    void write_u32(std::uint32_t v) { write_raw(&v, sizeof v); }
    void write_u64(std::uint64_t v) { write_raw(&v, sizeof v); }
    void write_f32(float v) { write_raw(&v, sizeof v); }
    void write_f64(double v) { write_raw(&v, sizeof v); }
    void write_magic(const char (&magic)[5]) { write_raw(magic, 4); }

    void close() {
        out_.close();
        if (!out_) throw DataError(path_ + ": write failed");
    }

private:
    std::string path_;
    std::ofstream out_;
};

}  // namespace dkvb::binio
