#pragma once

#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

namespace tractscope {

// printf-style formatting into a std::string.
std::string strfmt(const char* fmt, ...) __attribute__((format(printf, 1, 2)));

std::vector<std::string> split(const std::string& line, char sep);
std::string join(const std::vector<std::string>& parts, char sep);

// Strict numeric parsing; throws InputError naming `context` on failure.
double parse_double(const std::string& s, const std::string& context);
long parse_long(const std::string& s, const std::string& context);

std::string read_file(const std::filesystem::path& path);
std::vector<uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& content);

// Write-temp-then-rename; a partially written file is never visible under `path`.
void atomic_write_file(const std::filesystem::path& path, const void* data, size_t size);

}  // namespace tractscope
