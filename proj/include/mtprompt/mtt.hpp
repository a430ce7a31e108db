#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "mtprompt/tensor.hpp"

// Multi-tensor container (.mtt), little-endian:
//   magic "MTT1" | u32 entry count
//   per entry: u16 name length | name bytes | u8 dtype | u8 rank | rank x u32 dims | payload
// dtype codes: 0 = f32, 1 = f64, 2 = i32, 3 = u8. Payload is row-major.
// Round trips are bit-exact; parse errors carry the byte offset.

namespace mtp {

static_assert(std::endian::native == std::endian::little, "mtt i/o assumes a little-endian host");

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class MttDtype : uint8_t { f32 = 0, f64 = 1, i32 = 2, u8 = 3 };

template <typename T> struct mtt_dtype_of;
template <> struct mtt_dtype_of<float> { static constexpr MttDtype value = MttDtype::f32; };
template <> struct mtt_dtype_of<double> { static constexpr MttDtype value = MttDtype::f64; };
template <> struct mtt_dtype_of<int32_t> { static constexpr MttDtype value = MttDtype::i32; };
template <> struct mtt_dtype_of<uint8_t> { static constexpr MttDtype value = MttDtype::u8; };

inline size_t mtt_dtype_size(MttDtype d) {
    switch (d) {
        case MttDtype::f32: return 4;
        case MttDtype::f64: return 8;
        case MttDtype::i32: return 4;
        case MttDtype::u8: return 1;
    }
    throw IoError("mtt: unknown dtype");
}

struct MttEntry {
    MttDtype dtype;
    std::vector<int> shape;
    std::vector<unsigned char> payload;
};

class MttFile {
public:
    template <typename T>
    void add(const std::string& name, const Tensor<T>& t) {
        validate_name(name);
        MttEntry e;
        e.dtype = mtt_dtype_of<T>::value;
        e.shape = t.shape();
        e.payload.resize(static_cast<size_t>(t.numel()) * sizeof(T));
        std::memcpy(e.payload.data(), t.ptr(), e.payload.size());
        order_.push_back(name);
        entries_.emplace(name, std::move(e));
    }

    bool contains(const std::string& name) const { return entries_.count(name) != 0; }
    size_t size() const { return order_.size(); }
    const std::vector<std::string>& names() const { return order_; }

    template <typename T>
    Tensor<T> tensor(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw IoError("mtt: no entry named '" + name + "'");
        const MttEntry& e = it->second;
        if (e.dtype != mtt_dtype_of<T>::value)
            throw IoError("mtt: entry '" + name + "' has dtype code " +
                          std::to_string(static_cast<int>(e.dtype)));
        std::vector<T> data(e.payload.size() / sizeof(T));
        std::memcpy(data.data(), e.payload.data(), e.payload.size());
        return Tensor<T>::from(e.shape, std::move(data));
    }

    void write(const std::string& path) const {
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("mtt: cannot open '" + path + "' for writing");
        f.write("MTT1", 4);
        put_u32(f, static_cast<uint32_t>(order_.size()));
        for (const auto& name : order_) {
            const MttEntry& e = entries_.at(name);
            put_u16(f, static_cast<uint16_t>(name.size()));
            f.write(name.data(), static_cast<std::streamsize>(name.size()));
            f.put(static_cast<char>(e.dtype));
            f.put(static_cast<char>(e.shape.size()));
            for (int d : e.shape) put_u32(f, static_cast<uint32_t>(d));
            f.write(reinterpret_cast<const char*>(e.payload.data()),
                    static_cast<std::streamsize>(e.payload.size()));
        }
        if (!f) throw IoError("mtt: write failed for '" + path + "'");
    }

    static MttFile read(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw IoError("mtt: cannot open '" + path + "'");
        std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                         std::istreambuf_iterator<char>());
        return parse(bytes, path);
    }

    static MttFile parse(const std::vector<unsigned char>& b, const std::string& what = "<memory>") {
        MttFile out;
        size_t off = 0;
        auto need = [&](size_t n) {
            if (off + n > b.size())
                throw IoError("mtt: '" + what + "' truncated at offset " + std::to_string(off));
        };
        need(4);
        if (std::memcmp(b.data(), "MTT1", 4) != 0)
            throw IoError("mtt: '" + what + "' parse error at offset 0: bad magic");
        off = 4;
        need(4);
        const uint32_t count = get_u32(b, off);
        for (uint32_t i = 0; i < count; ++i) {
            need(2);
            const uint16_t name_len = get_u16(b, off);
            need(name_len);
            std::string name(reinterpret_cast<const char*>(b.data() + off), name_len);
            off += name_len;
            validate_name(name);
            need(2);
            const uint8_t dtype_code = b[off++];
            if (dtype_code > 3)
                throw IoError("mtt: '" + what + "' unknown dtype code " + std::to_string(dtype_code) +
                              " at offset " + std::to_string(off - 1));
            const uint8_t rank = b[off++];
            MttEntry e;
            e.dtype = static_cast<MttDtype>(dtype_code);
            int64_t numel = 1;
            for (uint8_t r = 0; r < rank; ++r) {
                need(4);
                const uint32_t d = get_u32(b, off);
                e.shape.push_back(static_cast<int>(d));
                numel *= d;
            }
            const size_t bytes_needed = static_cast<size_t>(numel) * mtt_dtype_size(e.dtype);
            need(bytes_needed);
            e.payload.assign(b.begin() + static_cast<ptrdiff_t>(off),
                             b.begin() + static_cast<ptrdiff_t>(off + bytes_needed));
            off += bytes_needed;
            if (out.entries_.count(name))
                throw IoError("mtt: '" + what + "' duplicate entry '" + name + "'");
            out.order_.push_back(name);
            out.entries_.emplace(std::move(name), std::move(e));
        }
        return out;
    }

private:
    static void validate_name(const std::string& name) {
        if (name.empty()) throw IoError("mtt: empty entry name");
        if (name.size() > 255) throw IoError("mtt: entry name longer than 255 bytes");
        for (unsigned char c : name)
            if (c < 0x20 || c > 0x7E) throw IoError("mtt: entry name must be printable ASCII");
    }
    static void put_u16(std::ofstream& f, uint16_t v) {
        f.put(static_cast<char>(v & 0xFF));
        f.put(static_cast<char>(v >> 8));
    }
    static void put_u32(std::ofstream& f, uint32_t v) {
        for (int i = 0; i < 4; ++i) f.put(static_cast<char>((v >> (8 * i)) & 0xFF));
    }
    static uint16_t get_u16(const std::vector<unsigned char>& b, size_t& off) {
        uint16_t v = static_cast<uint16_t>(b[off] | (b[off + 1] << 8));
        off += 2;
        return v;
    }
    static uint32_t get_u32(const std::vector<unsigned char>& b, size_t& off) {
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[off + static_cast<size_t>(i)]) << (8 * i);
        off += 4;
        return v;
    }

    std::vector<std::string> order_;
    std::map<std::string, MttEntry> entries_;
};

} // namespace mtp
