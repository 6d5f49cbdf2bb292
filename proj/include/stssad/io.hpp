#pragma once
// Binary container shared by tensor files and encoder checkpoints, plus the
// 8-bit grayscale PNG codec used by the dataset tools.
//
// Container layout (all integers and reals little-endian regardless of host):
//   bytes 0..7   magic "STSSAD01"
//   u32          record kind (1 = tensor, 2 = encoder checkpoint)
//   u32          format version (currently 1)
//   ...          kind-specific payload
//
// Tensor payload: u32 rank, u64 extents[rank], f64 values[prod(extents)].

#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "stssad/common.hpp"

namespace stssad::io {

inline constexpr char kMagic[8] = {'S', 'T', 'S', 'S', 'A', 'D', '0', '1'};
inline constexpr uint32_t kKindTensor = 1;
inline constexpr uint32_t kKindCheckpoint = 2;
inline constexpr uint32_t kFormatVersion = 1;

class Writer {
  public:
    explicit Writer(const std::string& path);
    void bytes(const void* p, size_t n);
    void u8(uint8_t v);
    void u32(uint32_t v);
    void u64(uint64_t v);
    void f64(double v);
    void f64s(const double* p, size_t n);
    void close();  // flushes and fails loudly on write errors

  private:
    std::string path_;
    std::ofstream out_;
};

class Reader {
  public:
    explicit Reader(const std::string& path);
    void bytes(void* p, size_t n);
    uint8_t u8();
    uint32_t u32();
    uint64_t u64();
    double f64();
    void f64s(double* p, size_t n);
    bool at_eof();

  private:
    std::string path_;
    std::ifstream in_;
};

// Magic + kind + version. read_header validates all three.
void write_header(Writer& w, uint32_t kind);
void read_header(Reader& r, uint32_t expected_kind);

void save_tensor(const std::string& path, const Shape& shape, const std::vector<double>& values);
std::pair<Shape, std::vector<double>> load_tensor(const std::string& path);

// Minimal PNG codec for 8-bit grayscale images (bit depth 8, color type 0),
// deflate via zlib. write accepts row-major pixels in [0,255]; read rejects
// anything but the exact format write produces plus unfiltered/filtered rows.
void write_png_gray8(const std::string& path, int64_t width, int64_t height,
                     const std::vector<uint8_t>& pixels);
std::pair<std::pair<int64_t, int64_t>, std::vector<uint8_t>> read_png_gray8(
    const std::string& path);

}  // namespace stssad::io
