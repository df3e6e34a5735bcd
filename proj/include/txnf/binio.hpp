#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <type_traits>
#include <vector>

#include "txnf/error.hpp"

namespace txnf {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

class BinaryWriter {
 public:
  explicit BinaryWriter(const std::string& path) : path_(path), out_(path, std::ios::binary) {
    if (!out_) throw Error("cannot write " + path);
  }

  template <class T>
    requires std::is_arithmetic_v<T>
  void put(T v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof v);
  }

  template <class T>
    requires std::is_arithmetic_v<T>
  void put_array(const T* data, std::size_t n) {
    out_.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(T)));
  }

  void put_bytes(const std::string& s) { out_.write(s.data(), static_cast<std::streamsize>(s.size())); }

  void put_string(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    put_bytes(s);
  }

  void close() {
    out_.close();
    if (!out_) throw Error("write failed: " + path_);
  }

 private:
  std::string path_;
  std::ofstream out_;
};

class BinaryReader {
 public:
  explicit BinaryReader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw Error("cannot read " + path);
  }

  template <class T>
    requires std::is_arithmetic_v<T>
  T get() {
    T v{};
    read(&v, sizeof v);
    return v;
  }

  template <class T>
    requires std::is_arithmetic_v<T>
  void get_array(T* data, std::size_t n) {
    read(data, n * sizeof(T));
  }

  std::string get_bytes(std::size_t n) {
    std::string s(n, '\0');
    read(s.data(), n);
    return s;
  }

  std::string get_string() { return get_bytes(get<std::uint32_t>()); }

  bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }
  const std::string& path() const { return path_; }

 private:
  void read(void* dst, std::size_t n) {
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) throw Error("truncated file: " + path_);
  }

  std::string path_;
  std::ifstream in_;
};

/// FNV-1a of a file's bytes.
std::uint64_t file_checksum(const std::string& path);

}  // namespace txnf
