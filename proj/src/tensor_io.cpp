#include "tcl/tensor_io.hpp"

#include <cstring>
#include <fstream>
#include <vector>

namespace tcl {

namespace {

constexpr char kMagic[4] = {'T', 'C', 'L', 'T'};

void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

std::uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

} // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
    os.write(kMagic, 4);
    put_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) put_u64(os, e);
    for (double v : t.data()) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        put_u64(os, bits);
    }
}

Tensor read_tensor(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw IoError("read_tensor: bad magic, not a TCLT tensor");
    const std::uint32_t rank = get_u32(is);
    if (!is || rank > 8) throw IoError("read_tensor: implausible rank");
    Shape shape(rank);
    for (std::uint32_t i = 0; i < rank; ++i) shape[i] = get_u64(is);
    std::vector<double> data(shape_numel(shape));
    for (double& v : data) {
        const std::uint64_t bits = get_u64(is);
        std::memcpy(&v, &bits, 8);
    }
    if (!is) throw IoError("read_tensor: truncated payload");
    return Tensor::from_data(std::move(shape), std::move(data));
}

void save_tensor(const std::string& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("save_tensor: cannot open " + path);
    write_tensor(os, t);
    if (!os) throw IoError("save_tensor: write failed for " + path);
}

Tensor load_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("load_tensor: cannot open " + path);
    return read_tensor(is);
}

std::uint64_t fnv1a64(const void* data, std::size_t len) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

std::uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

std::uint64_t tensor_digest(const Tensor& t) {
    std::uint64_t h = fnv1a64(t.shape().data(), t.shape().size() * sizeof(std::size_t));
    h ^= fnv1a64(t.data().data(), t.data().size() * sizeof(double));
    return h;
}

std::uint64_t file_digest(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("file_digest: cannot open " + path);
    std::vector<char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return fnv1a64(bytes.data(), bytes.size());
}

void write_pgm(const std::string& path, std::size_t h, std::size_t w,
               const std::vector<double>& values) {
    if (values.size() != h * w) throw DimensionError("write_pgm: size mismatch");
    double lo = values[0], hi = values[0];
    for (double v : values) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const double span = hi - lo;
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("write_pgm: cannot open " + path);
    os << "P5\n" << w << " " << h << "\n255\n";
    for (double v : values) {
        const double s = span > 0.0 ? (v - lo) / span : 0.0;
        os.put(static_cast<char>(static_cast<unsigned char>(s * 255.0 + 0.5)));
    }
    if (!os) throw IoError("write_pgm: write failed for " + path);
}

} // namespace tcl
