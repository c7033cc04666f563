// Result emission: deterministic CSV/JSON text files and the binary sample
// container. All numeric text uses round-trip formatting ("%.17g") so that a
// rerun with the same seed and worker count produces byte-identical files.
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cldlab/samplers.hpp"

namespace cldlab {

// Round-trip decimal rendering of one double (shortest %.17g form; "nan" and
// "inf"/"-inf" pass through as those literals).
std::string fmt_double(double x);

// Column-oriented CSV document: a header row plus equally long value columns.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<double>> columns;

  // Renders "h1,h2,...\n" followed by one row per index. Throws
  // std::invalid_argument when column lengths disagree with each other or
  // with the header.
  std::string render() const;
};

// Writes content to path, creating parent directories as needed. Throws
// std::runtime_error when the file cannot be written.
void write_text_file(const std::string& path, const std::string& content);

// Reads a whole file into a string; throws std::runtime_error when missing.
std::string read_text_file(const std::string& path);

// Sample emission. Columns are x_0..x_{d-1} and, when with_v is set,
// v_0..v_{d-1} appended.
std::string samples_csv(const StateBatch& batch, bool with_v);

// Little-endian binary container: 8-byte magic "CLDSMP01", u32 row count,
// u32 column count, then rows*cols f64 payload in row-major order. Columns
// follow the CSV layout above.
void write_samples_blob(const std::string& path, const StateBatch& batch,
                        bool with_v);

// Reads a CLDSMP01 container back into row-major values. Throws
// std::runtime_error on a bad magic, truncation, or trailing bytes.
struct SampleBlob {
  std::uint32_t n = 0;
  std::uint32_t cols = 0;
  std::vector<double> values;  // n x cols, row-major
};
SampleBlob read_samples_blob(const std::string& path);

}  // namespace cldlab
