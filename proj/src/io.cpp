#include "cldlab/io.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace cldlab {

std::string fmt_double(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  // Find the shortest precision that round-trips, so 0.5 prints as "0.5"
  // rather than a 17-digit expansion, while irrationals stay exact.
  char buf[40];
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, x);
    double back = 0.0;
    std::sscanf(buf, "%lf", &back);
    if (back == x) break;
  }
  return buf;
}

std::string CsvTable::render() const {
  if (columns.size() != header.size()) {
    throw std::invalid_argument("csv: header and column counts disagree");
  }
  std::string out;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (c) out += ',';
    out += header[c];
  }
  out += '\n';
  const std::size_t rows = columns.empty() ? 0 : columns.front().size();
  for (const auto& col : columns) {
    if (col.size() != rows) {
      throw std::invalid_argument("csv: ragged columns");
    }
  }
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < columns.size(); ++c) {
      if (c) out += ',';
      out += fmt_double(columns[c][r]);
    }
    out += '\n';
  }
  return out;
}

void write_text_file(const std::string& path, const std::string& content) {
  const std::filesystem::path fp(path);
  if (fp.has_parent_path()) {
    std::filesystem::create_directories(fp.parent_path());
  }
  std::ofstream f(fp, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  f.write(content.data(), std::streamsize(content.size()));
  if (!f) throw std::runtime_error("short write: " + path);
}

std::string read_text_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for reading: " + path);
  std::string out((std::istreambuf_iterator<char>(f)),
                  std::istreambuf_iterator<char>());
  return out;
}

namespace {

int sample_cols(const StateBatch& batch, bool with_v) {
  return with_v ? 2 * batch.d : batch.d;
}

double sample_at(const StateBatch& batch, std::int64_t row, int col) {
  const int d = batch.d;
  return col < d ? batch.x[std::size_t(row) * d + col]
                 : batch.v[std::size_t(row) * d + (col - d)];
}

}  // namespace

std::string samples_csv(const StateBatch& batch, bool with_v) {
  const int cols = sample_cols(batch, with_v);
  std::string out;
  for (int c = 0; c < cols; ++c) {
    if (c) out += ',';
    out += c < batch.d ? "x_" + std::to_string(c)
                       : "v_" + std::to_string(c - batch.d);
  }
  out += '\n';
  for (std::int64_t r = 0; r < batch.n; ++r) {
    for (int c = 0; c < cols; ++c) {
      if (c) out += ',';
      out += fmt_double(sample_at(batch, r, c));
    }
    out += '\n';
  }
  return out;
}

void write_samples_blob(const std::string& path, const StateBatch& batch,
                        bool with_v) {
  const std::uint32_t cols = std::uint32_t(sample_cols(batch, with_v));
  const std::uint32_t n = std::uint32_t(batch.n);
  std::string raw;
  raw.reserve(16 + std::size_t(n) * cols * 8);
  raw.append("CLDSMP01", 8);
  char word[8];
  std::memcpy(word, &n, 4);
  raw.append(word, 4);
  std::memcpy(word, &cols, 4);
  raw.append(word, 4);
  for (std::int64_t r = 0; r < batch.n; ++r) {
    for (std::uint32_t c = 0; c < cols; ++c) {
      const double v = sample_at(batch, r, int(c));
      std::memcpy(word, &v, 8);
      raw.append(word, 8);
    }
  }
  write_text_file(path, raw);
}

SampleBlob read_samples_blob(const std::string& path) {
  const std::string raw = read_text_file(path);
  if (raw.size() < 16 || raw.compare(0, 8, "CLDSMP01") != 0) {
    throw std::runtime_error("not a CLDSMP01 sample file: " + path);
  }
  SampleBlob blob;
  std::memcpy(&blob.n, raw.data() + 8, 4);
  std::memcpy(&blob.cols, raw.data() + 12, 4);
  const std::size_t want = std::size_t(blob.n) * blob.cols;
  if (raw.size() != 16 + want * 8) {
    throw std::runtime_error("corrupt CLDSMP01 payload size: " + path);
  }
  blob.values.resize(want);
  std::memcpy(blob.values.data(), raw.data() + 16, want * 8);
  return blob;
}

}  // namespace cldlab
