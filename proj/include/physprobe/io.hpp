#pragma once

#include "physprobe/core.hpp"
#include "physprobe/errors.hpp"

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

namespace physprobe::io {

// Little-endian binary primitives. Hosts here are little-endian x86/arm64;
// the byte-level layout is fixed by these helpers either way.

template <typename T>
void write_pod(std::ostream& os, T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw IoError("unexpected end of stream");
    return v;
}

inline void write_string(std::ostream& os, const std::string& s) {
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is) {
    const auto n = read_pod<std::uint32_t>(is);
    std::string s(n, '\0');
    is.read(s.data(), n);
    if (!is) throw IoError("unexpected end of stream");
    return s;
}

inline void write_matrix(std::ostream& os, const Matrix& m) {
    write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(m.rows()));
    write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(m.cols()));
    os.write(reinterpret_cast<const char*>(m.data()),
             static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(m.size())));
}

inline Matrix read_matrix(std::istream& is) {
    const auto rows = read_pod<std::uint64_t>(is);
    const auto cols = read_pod<std::uint64_t>(is);
    Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    is.read(reinterpret_cast<char*>(m.data()),
            static_cast<std::streamsize>(sizeof(double) * rows * cols));
    if (!is) throw IoError("unexpected end of stream");
    return m;
}

/// Write-to-temp then atomic rename; a crashed writer never leaves a partial
/// file at the final path.
class AtomicFileWriter {
public:
    explicit AtomicFileWriter(const std::filesystem::path& final_path)
        : final_(final_path), tmp_(final_path.string() + ".tmp") {
        std::filesystem::create_directories(final_path.parent_path());
        os_.open(tmp_, std::ios::binary | std::ios::trunc);
        if (!os_) throw IoError("cannot open " + tmp_.string());
    }
    std::ofstream& stream() { return os_; }
    void commit() {
        os_.flush();
        if (!os_) throw IoError("write failed for " + tmp_.string());
        os_.close();
        std::filesystem::rename(tmp_, final_);
    }
    ~AtomicFileWriter() {
        if (os_.is_open()) {
            os_.close();
            std::error_code ec;
            std::filesystem::remove(tmp_, ec);
        }
    }

private:
    std::filesystem::path final_;
    std::filesystem::path tmp_;
    std::ofstream os_;
};

} // namespace physprobe::io
