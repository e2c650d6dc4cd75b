#include "modal_audit/binary_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "modal_audit/errors.hpp"

namespace modal_audit {

namespace {

template <typename T>
void put_le(std::vector<std::uint8_t>& buf, T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        buf.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
}

template <typename T>
T get_le(const std::uint8_t* p) {
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        v |= static_cast<T>(p[i]) << (8 * i);
    }
    return v;
}

}  // namespace

void ByteWriter::u8(std::uint8_t v) { buf_.push_back(v); }
void ByteWriter::u16(std::uint16_t v) { put_le(buf_, v); }
void ByteWriter::u32(std::uint32_t v) { put_le(buf_, v); }
void ByteWriter::u64(std::uint64_t v) { put_le(buf_, v); }
void ByteWriter::f32(float v) { put_le(buf_, std::bit_cast<std::uint32_t>(v)); }
void ByteWriter::f64(double v) { put_le(buf_, std::bit_cast<std::uint64_t>(v)); }

void ByteWriter::raw(std::string_view bytes) {
    buf_.insert(buf_.end(), bytes.begin(), bytes.end());
}

void ByteWriter::f32s(std::span<const float> values) {
    buf_.reserve(buf_.size() + 4 * values.size());
    for (float v : values) f32(v);
}

const std::uint8_t* ByteReader::take(std::size_t n) {
    if (n > data_.size() - pos_) {
        throw CorruptionError("truncated stream: need " + std::to_string(n) + " bytes, have " +
                                  std::to_string(data_.size() - pos_),
                              pos_);
    }
    const std::uint8_t* p = data_.data() + pos_;
    pos_ += n;
    return p;
}

std::uint8_t ByteReader::u8() { return *take(1); }
std::uint16_t ByteReader::u16() { return get_le<std::uint16_t>(take(2)); }
std::uint32_t ByteReader::u32() { return get_le<std::uint32_t>(take(4)); }
std::uint64_t ByteReader::u64() { return get_le<std::uint64_t>(take(8)); }
float ByteReader::f32() { return std::bit_cast<float>(get_le<std::uint32_t>(take(4))); }
double ByteReader::f64() { return std::bit_cast<double>(get_le<std::uint64_t>(take(8))); }

std::string ByteReader::raw(std::size_t n) {
    const std::uint8_t* p = take(n);
    return std::string(reinterpret_cast<const char*>(p), n);
}

void ByteReader::f32s(std::span<float> out) {
    const std::uint8_t* p = take(4 * out.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = std::bit_cast<float>(get_le<std::uint32_t>(p + 4 * i));
    }
}

void ByteReader::expect_end(const char* what) const {
    if (!at_end()) {
        throw CorruptionError(std::string(what) + ": " + std::to_string(remaining()) +
                                  " trailing bytes",
                              pos_);
    }
}

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open for reading: " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("read failed: " + path);
    return bytes;
}

void write_file_bytes(const std::string& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw IoError("write failed: " + path);
}

void expect_magic(ByteReader& in, std::string_view magic, const char* format_name) {
    if (in.remaining() < magic.size()) {
        throw UnsupportedFormatError(std::string("not a ") + format_name +
                                     " file: too short for magic");
    }
    std::string got = in.raw(magic.size());
    if (got != magic) {
        throw UnsupportedFormatError(std::string("not a ") + format_name + " file: bad magic");
    }
}

}  // namespace modal_audit
