#pragma once

// Named-tensor container ("MDT1") used for datasets and checkpoints.
//
// Layout, all integers little-endian:
//   "MDT1"                       4 bytes
//   entry count                  u32
//   per entry:
//     name length                u8, then the name bytes (UTF-8, 1..255 bytes)
//     dtype                      u8  (1 = f32, 2 = f64, 3 = u8)
//     rank                       u8
//     dims                       rank x u32
//     payload                    product(dims) x dtype size, row-major

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <type_traits>
#include <vector>

#include "tensor.hpp"

namespace mdseg {

static_assert(std::endian::native == std::endian::little, "tensor files assume a little-endian host");

enum class DType : std::uint8_t { f32 = 1, f64 = 2, u8 = 3 };

inline std::size_t dtype_size(DType t) {
    switch (t) {
    case DType::f32: return 4;
    case DType::f64: return 8;
    case DType::u8: return 1;
    }
    return 0;
}

inline const char* dtype_name(DType t) {
    switch (t) {
    case DType::f32: return "f32";
    case DType::f64: return "f64";
    case DType::u8: return "u8";
    }
    return "?";
}

/// The dtype a Tensor of this build stores.
constexpr DType native_dtype() { return std::is_same_v<Scalar, float> ? DType::f32 : DType::f64; }

enum class FormatCode { io, bad_magic, truncated, unknown_dtype, dtype_mismatch, bad_name, missing_entry, bad_shape };

inline const char* format_code_name(FormatCode c) {
    switch (c) {
    case FormatCode::io: return "io";
    case FormatCode::bad_magic: return "bad_magic";
    case FormatCode::truncated: return "truncated";
    case FormatCode::unknown_dtype: return "unknown_dtype";
    case FormatCode::dtype_mismatch: return "dtype_mismatch";
    case FormatCode::bad_name: return "bad_name";
    case FormatCode::missing_entry: return "missing_entry";
    case FormatCode::bad_shape: return "bad_shape";
    }
    return "?";
}

class TensorFileError : public FormatError {
public:
    TensorFileError(FormatCode code, const std::string& what)
        : FormatError(std::string(format_code_name(code)) + ": " + what), code_(code) {}
    FormatCode code() const { return code_; }

private:
    FormatCode code_;
};

struct TensorEntry {
    std::string name;
    DType dtype = DType::f64;
    std::vector<std::uint32_t> dims;
    std::vector<unsigned char> payload;  ///< raw little-endian bytes

    std::size_t count() const {
        std::size_t n = 1;
        for (auto d : dims) n *= d;
        return n;
    }
};

class TensorFile {
public:
    const std::vector<TensorEntry>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }
    bool contains(const std::string& name) const { return find(name) != nullptr; }

    void add(TensorEntry e) {
        check_name(e.name);
        if (contains(e.name)) throw TensorFileError(FormatCode::bad_name, "duplicate entry '" + e.name + "'");
        if (e.payload.size() != e.count() * dtype_size(e.dtype))
            throw TensorFileError(FormatCode::bad_shape, "payload size of '" + e.name + "' does not match its dims");
        if (e.dims.size() > 255) throw TensorFileError(FormatCode::bad_shape, "rank above 255");
        entries_.push_back(std::move(e));
    }

    /// Stores a tensor with its shape, in the build's scalar type or narrowed to f32.
    void add_tensor(const std::string& name, const Tensor& t, DType dtype = native_dtype()) {
        TensorEntry e;
        e.name = name;
        e.dtype = dtype;
        for (int d : t.shape().dims()) e.dims.push_back(static_cast<std::uint32_t>(d));
        if (dtype == DType::f64) {
            append_values<double>(e.payload, t.values());
        } else if (dtype == DType::f32) {
            append_values<float>(e.payload, t.values());
        } else {
            throw TensorFileError(FormatCode::dtype_mismatch, "tensor '" + name + "' cannot be stored as u8");
        }
        add(std::move(e));
    }

    void add_bytes(const std::string& name, std::vector<std::uint32_t> dims, const std::vector<std::uint8_t>& bytes) {
        TensorEntry e;
        e.name = name;
        e.dtype = DType::u8;
        e.dims = std::move(dims);
        e.payload.assign(bytes.begin(), bytes.end());
        add(std::move(e));
    }

    void add_text(const std::string& name, const std::string& text) {
        add_bytes(name, {static_cast<std::uint32_t>(text.size())}, std::vector<std::uint8_t>(text.begin(), text.end()));
    }

    const TensorEntry& entry(const std::string& name) const {
        const TensorEntry* e = find(name);
        if (!e) throw TensorFileError(FormatCode::missing_entry, "no entry named '" + name + "'");
        return *e;
    }

    /// Reads a floating entry; its dtype must be `expected`.
    Tensor tensor(const std::string& name, DType expected = native_dtype()) const {
        const TensorEntry& e = entry(name);
        if (e.dtype != expected)
            throw TensorFileError(FormatCode::dtype_mismatch, "entry '" + name + "' is " + dtype_name(e.dtype) +
                                                                  ", expected " + dtype_name(expected));
        if (e.dims.empty() || e.dims.size() > 4)
            throw TensorFileError(FormatCode::bad_shape, "entry '" + name + "' has rank " + std::to_string(e.dims.size()));
        std::vector<int> dims;
        for (auto d : e.dims) {
            if (d == 0) throw TensorFileError(FormatCode::bad_shape, "entry '" + name + "' has a zero dimension");
            dims.push_back(static_cast<int>(d));
        }
        std::vector<Scalar> values(e.count());
        if (e.dtype == DType::f64) {
            read_values<double>(e.payload, values);
        } else if (e.dtype == DType::f32) {
            read_values<float>(e.payload, values);
        } else {
            throw TensorFileError(FormatCode::dtype_mismatch, "entry '" + name + "' is not floating point");
        }
        return Tensor(Shape(dims), std::move(values));
    }

    const std::vector<unsigned char>& bytes(const std::string& name) const {
        const TensorEntry& e = entry(name);
        if (e.dtype != DType::u8)
            throw TensorFileError(FormatCode::dtype_mismatch, "entry '" + name + "' is " + dtype_name(e.dtype) + ", expected u8");
        return e.payload;
    }

    std::string text(const std::string& name) const {
        const auto& b = bytes(name);
        return std::string(b.begin(), b.end());
    }

    std::vector<unsigned char> serialize() const {
        std::size_t total = 8;
        for (const TensorEntry& e : entries_) total += 3 + e.name.size() + 4 * e.dims.size() + e.payload.size();
        std::vector<unsigned char> out;
        out.reserve(total);
        for (char c : {'M', 'D', 'T', '1'}) out.push_back(static_cast<unsigned char>(c));
        put_u32(out, static_cast<std::uint32_t>(entries_.size()));
        for (const TensorEntry& e : entries_) {
            out.push_back(static_cast<unsigned char>(e.name.size()));
            out.insert(out.end(), e.name.begin(), e.name.end());
            out.push_back(static_cast<unsigned char>(e.dtype));
            out.push_back(static_cast<unsigned char>(e.dims.size()));
            for (auto d : e.dims) put_u32(out, d);
            out.insert(out.end(), e.payload.begin(), e.payload.end());
        }
        return out;
    }

    static TensorFile parse(const std::vector<unsigned char>& data) {
        Reader r{data};
        r.need(4, "magic");
        if (std::memcmp(data.data(), "MDT1", 4) != 0) throw TensorFileError(FormatCode::bad_magic, "not a tensor file");
        r.pos = 4;
        const std::uint32_t count = r.u32("entry count");
        TensorFile file;
        for (std::uint32_t i = 0; i < count; ++i) {
            TensorEntry e;
            const std::size_t len = r.u8("name length");
            r.need(len, "name");
            e.name.assign(reinterpret_cast<const char*>(data.data() + r.pos), len);
            r.pos += len;
            const std::uint8_t code = r.u8("dtype");
            if (code < 1 || code > 3)
                throw TensorFileError(FormatCode::unknown_dtype, "entry '" + e.name + "' has dtype code " + std::to_string(code));
            e.dtype = static_cast<DType>(code);
            const std::size_t rank = r.u8("rank");
            for (std::size_t k = 0; k < rank; ++k) e.dims.push_back(r.u32("dims"));
            const std::size_t bytes = e.count() * dtype_size(e.dtype);
            r.need(bytes, "payload of '" + e.name + "'");
            e.payload.assign(data.begin() + static_cast<std::ptrdiff_t>(r.pos),
                             data.begin() + static_cast<std::ptrdiff_t>(r.pos + bytes));
            r.pos += bytes;
            file.add(std::move(e));
        }
        if (r.pos != data.size()) throw TensorFileError(FormatCode::truncated, "trailing bytes after the last entry");
        return file;
    }

    void write(const std::string& path) const {
        const auto data = serialize();
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        if (!f) throw TensorFileError(FormatCode::io, "cannot open '" + path + "' for writing");
        f.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
        if (!f) throw TensorFileError(FormatCode::io, "failed writing '" + path + "'");
    }

    static TensorFile read(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw TensorFileError(FormatCode::io, "cannot open '" + path + "'");
        std::vector<unsigned char> data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
        try {
            return parse(data);
        } catch (const TensorFileError& e) {
            throw TensorFileError(e.code(), path + ": " + strip_code(e.what()));
        }
    }

private:
    struct Reader {
        const std::vector<unsigned char>& data;
        std::size_t pos = 0;

        void need(std::size_t n, const std::string& what) const {
            if (data.size() - pos < n) throw TensorFileError(FormatCode::truncated, "file ends inside " + what);
        }
        std::uint8_t u8(const std::string& what) {
            need(1, what);
            return data[pos++];
        }
        std::uint32_t u32(const std::string& what) {
            need(4, what);
            std::uint32_t v = 0;
            std::memcpy(&v, data.data() + pos, 4);
            pos += 4;
            return v;
        }
    };

    static std::string strip_code(const std::string& msg) {
        const auto colon = msg.find(": ");
        return colon == std::string::npos ? msg : msg.substr(colon + 2);
    }

    static void check_name(const std::string& name) {
        if (name.empty() || name.size() > 255)
            throw TensorFileError(FormatCode::bad_name, "entry names must be 1..255 bytes");
    }

    static void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
        unsigned char b[4];
        std::memcpy(b, &v, 4);
        out.insert(out.end(), b, b + 4);
    }

    template <class T>
    static void append_values(std::vector<unsigned char>& out, std::span<const Scalar> values) {
        out.resize(values.size() * sizeof(T));
        for (std::size_t i = 0; i < values.size(); ++i) {
            const T v = static_cast<T>(values[i]);
            std::memcpy(out.data() + i * sizeof(T), &v, sizeof(T));
        }
    }

    template <class T>
    static void read_values(const std::vector<unsigned char>& in, std::vector<Scalar>& values) {
        for (std::size_t i = 0; i < values.size(); ++i) {
            T v;
            std::memcpy(&v, in.data() + i * sizeof(T), sizeof(T));
            values[i] = static_cast<Scalar>(v);
        }
    }

    const TensorEntry* find(const std::string& name) const {
        for (const TensorEntry& e : entries_)
            if (e.name == name) return &e;
        return nullptr;
    }

    std::vector<TensorEntry> entries_;
};

} // namespace mdseg
