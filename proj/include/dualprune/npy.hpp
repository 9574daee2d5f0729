#pragma once

// NPY v1.0 array file I/O.
//
// Accepted on read: little-endian '<f4' / '<f8', C order, any rank.
// float32 payloads are widened exactly to float64. Written files are
// always '<f8', version 1.0, header padded to a 64-byte boundary.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "dualprune/error.hpp"
#include "dualprune/tensor.hpp"

namespace dualprune::npy {

static_assert(std::endian::native == std::endian::little, "little-endian host required");

namespace detail {

inline constexpr char kMagic[6] = {'\x93', 'N', 'U', 'M', 'P', 'Y'};

struct Header {
    std::string descr;
    bool fortran_order = false;
    std::vector<std::size_t> shape;
};

inline std::string::size_type find_key(const std::string& dict, const std::string& key,
                                       const std::string& path) {
    const auto pos = dict.find("'" + key + "'");
    if (pos == std::string::npos) {
        throw FormatError("npy: header missing key '" + key + "' in " + path);
    }
    auto colon = dict.find(':', pos);
    if (colon == std::string::npos) {
        throw FormatError("npy: malformed header entry for '" + key + "' in " + path);
    }
    ++colon;
    while (colon < dict.size() && dict[colon] == ' ') {
        ++colon;
    }
    return colon;
}

inline Header parse_header(const std::string& dict, const std::string& path) {
    Header h;

    auto pos = find_key(dict, "descr", path);
    if (pos >= dict.size() || dict[pos] != '\'') {
        throw FormatError("npy: descr value is not a string in " + path);
    }
    const auto end = dict.find('\'', pos + 1);
    if (end == std::string::npos) {
        throw FormatError("npy: unterminated descr string in " + path);
    }
    h.descr = dict.substr(pos + 1, end - pos - 1);

    pos = find_key(dict, "fortran_order", path);
    if (dict.compare(pos, 4, "True") == 0) {
        h.fortran_order = true;
    } else if (dict.compare(pos, 5, "False") == 0) {
        h.fortran_order = false;
    } else {
        throw FormatError("npy: fortran_order is not a boolean in " + path);
    }

    pos = find_key(dict, "shape", path);
    if (pos >= dict.size() || dict[pos] != '(') {
        throw FormatError("npy: shape value is not a tuple in " + path);
    }
    const auto close = dict.find(')', pos);
    if (close == std::string::npos) {
        throw FormatError("npy: unterminated shape tuple in " + path);
    }
    std::string tuple = dict.substr(pos + 1, close - pos - 1);
    std::size_t i = 0;
    while (i < tuple.size()) {
        while (i < tuple.size() && (tuple[i] == ' ' || tuple[i] == ',')) {
            ++i;
        }
        if (i >= tuple.size()) {
            break;
        }
        std::size_t digits = 0;
        while (i + digits < tuple.size() && tuple[i + digits] >= '0' && tuple[i + digits] <= '9') {
            ++digits;
        }
        if (digits == 0) {
            throw FormatError("npy: non-integer dimension in shape tuple in " + path);
        }
        h.shape.push_back(std::stoull(tuple.substr(i, digits)));
        i += digits;
    }
    return h;
}

}  // namespace detail

inline Tensor read(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("npy: cannot open " + path);
    }

    char magic[6];
    in.read(magic, 6);
    if (!in || std::memcmp(magic, detail::kMagic, 6) != 0) {
        throw FormatError("npy: bad magic in " + path);
    }

    unsigned char version[2];
    in.read(reinterpret_cast<char*>(version), 2);
    if (!in) {
        throw FormatError("npy: truncated version field in " + path);
    }
    if (version[0] != 1 || version[1] != 0) {
        throw UnsupportedError("npy: version " + std::to_string(version[0]) + "." +
                               std::to_string(version[1]) + " not supported (need 1.0) in " + path);
    }

    unsigned char len_bytes[2];
    in.read(reinterpret_cast<char*>(len_bytes), 2);
    if (!in) {
        throw FormatError("npy: truncated header length in " + path);
    }
    const std::size_t header_len = static_cast<std::size_t>(len_bytes[0]) |
                                   (static_cast<std::size_t>(len_bytes[1]) << 8);

    std::string dict(header_len, '\0');
    in.read(dict.data(), static_cast<std::streamsize>(header_len));
    if (!in || dict.empty() || dict.back() != '\n') {
        throw FormatError("npy: malformed header block in " + path);
    }

    const detail::Header h = detail::parse_header(dict, path);
    if (h.fortran_order) {
        throw UnsupportedError("npy: Fortran-order arrays not supported in " + path);
    }

    std::size_t item_size = 0;
    if (h.descr == "<f8") {
        item_size = 8;
    } else if (h.descr == "<f4") {
        item_size = 4;
    } else {
        throw UnsupportedError("npy: dtype '" + h.descr + "' not supported (need <f4 or <f8) in " +
                               path);
    }

    const std::size_t count = Tensor::element_count(h.shape);
    std::vector<double> values(count);
    if (count > 0) {
        if (item_size == 8) {
            in.read(reinterpret_cast<char*>(values.data()),
                    static_cast<std::streamsize>(count * sizeof(double)));
        } else {
            std::vector<float> narrow(count);
            in.read(reinterpret_cast<char*>(narrow.data()),
                    static_cast<std::streamsize>(count * sizeof(float)));
            for (std::size_t i = 0; i < count; ++i) {
                values[i] = static_cast<double>(narrow[i]);  // exact widening
            }
        }
        if (static_cast<std::size_t>(in.gcount()) != count * item_size) {
            throw FormatError("npy: payload shorter than header shape in " + path);
        }
    }

    Tensor t(h.shape, std::move(values));
    if (!t.all_finite()) {
        throw DataError("npy: non-finite payload value in " + path);
    }
    return t;
}

inline void write(const std::string& path, const Tensor& t) {
    std::string shape_str = "(";
    for (std::size_t i = 0; i < t.shape().size(); ++i) {
        shape_str += std::to_string(t.shape()[i]);
        if (t.shape().size() == 1 || i + 1 < t.shape().size()) {
            shape_str += ",";
        }
        if (i + 1 < t.shape().size()) {
            shape_str += " ";
        }
    }
    shape_str += ")";

    std::string dict =
        "{'descr': '<f8', 'fortran_order': False, 'shape': " + shape_str + ", }";
    const std::size_t unpadded = 6 + 2 + 2 + dict.size() + 1;  // +1 for trailing '\n'
    const std::size_t padded = (unpadded + 63) / 64 * 64;
    dict.append(padded - unpadded, ' ');
    dict += '\n';

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("npy: cannot open " + path + " for writing");
    }
    out.write(detail::kMagic, 6);
    const unsigned char version[2] = {1, 0};
    out.write(reinterpret_cast<const char*>(version), 2);
    const std::size_t header_len = dict.size();
    const unsigned char len_bytes[2] = {static_cast<unsigned char>(header_len & 0xff),
                                        static_cast<unsigned char>((header_len >> 8) & 0xff)};
    out.write(reinterpret_cast<const char*>(len_bytes), 2);
    out.write(dict.data(), static_cast<std::streamsize>(dict.size()));
    if (t.size() > 0) {
        out.write(reinterpret_cast<const char*>(t.data().data()),
                  static_cast<std::streamsize>(t.size() * sizeof(double)));
    }
    if (!out) {
        throw IoError("npy: write failed for " + path);
    }
}

}  // namespace dualprune::npy
