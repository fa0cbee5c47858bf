#include <resfim/rten.hpp>

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace resfim {

namespace {

constexpr std::array<char, 4> kMagic{'R', 'T', 'E', 'N'};

static_assert(std::endian::native == std::endian::little, "RTEN I/O assumes a little-endian host");

template <class T>
void put(std::string& out, T value)
{
    char buf[sizeof(T)];
    std::memcpy(buf, &value, sizeof(T));
    out.append(buf, sizeof(T));
}

template <class T>
T get(const std::string& in, std::size_t& pos)
{
    if (pos + sizeof(T) > in.size()) throw FormatError("RTEN: truncated payload");
    T value;
    std::memcpy(&value, in.data() + pos, sizeof(T));
    pos += sizeof(T);
    return value;
}

} // namespace

std::string encode_rten(const Tensor& t)
{
    std::string out;
    out.reserve(8 + 4 * t.shape().size() + 8 * std::size_t(t.size()));
    out.append(kMagic.data(), kMagic.size());
    put<std::uint32_t>(out, std::uint32_t(t.rank()));
    for (Index d : t.shape()) put<std::uint32_t>(out, std::uint32_t(d));
    out.append(reinterpret_cast<const char*>(t.ptr()), std::size_t(t.size()) * sizeof(double));
    return out;
}

Tensor decode_rten(const std::string& bytes)
{
    if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic.data(), kMagic.size()) != 0) {
        throw FormatError("RTEN: bad magic");
    }
    std::size_t pos = 4;
    const auto rank = get<std::uint32_t>(bytes, pos);
    Shape shape(rank);
    for (auto& d : shape) d = Index(get<std::uint32_t>(bytes, pos));
    const Index n = shape_size(shape);
    if (bytes.size() - pos != std::size_t(n) * sizeof(double)) {
        throw FormatError("RTEN: payload length does not match shape " + shape_string(shape));
    }
    Tensor t(shape);
    std::memcpy(t.ptr(), bytes.data() + pos, std::size_t(n) * sizeof(double));
    return t;
}

void write_rten(std::ostream& os, const Tensor& t)
{
    const std::string bytes = encode_rten(t);
    os.write(bytes.data(), std::streamsize(bytes.size()));
}

Tensor read_rten(std::istream& is)
{
    std::ostringstream buf;
    buf << is.rdbuf();
    return decode_rten(buf.str());
}

void save_rten(const std::filesystem::path& path, const Tensor& t)
{
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open " + path.string() + " for writing");
    write_rten(os, t);
}

Tensor load_rten(const std::filesystem::path& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open " + path.string());
    return read_rten(is);
}

std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t seed)
{
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < size; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

} // namespace resfim
