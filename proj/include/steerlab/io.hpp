#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace steerlab {

// Text-serialization helpers shared by checkpoints, steering-vector files
// and report emitters. Doubles are written as C hex-floats so every file
// round-trips bit-exactly and re-serialization is byte-identical.

std::string double_to_hex(double v);
double hex_to_double(const std::string& s);

// Shortest decimal representation that round-trips (for human-facing CSV).
std::string double_to_string(double v);

uint64_t fnv1a64(const std::string& s);
std::string hash_to_hex(uint64_t h);

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& content);
bool file_exists(const std::string& path);

std::vector<std::string> split_lines(const std::string& text);
std::vector<std::string> split(const std::string& s, char sep);

}  // namespace steerlab
