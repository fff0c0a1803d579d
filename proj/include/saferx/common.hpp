#ifndef SAFERX_COMMON_HPP
#define SAFERX_COMMON_HPP

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace saferx {

/// Base class for all engine errors.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class MalformedCode : public Error { public: using Error::Error; };
class LevelTooShallow : public Error { public: using Error::Error; };
class UnknownCode : public Error { public: using Error::Error; };
class UnknownMedication : public Error { public: using Error::Error; };
class EmptyVocab : public Error { public: using Error::Error; };
class AllRecordsUnmapped : public Error { public: using Error::Error; };
class EmptyLexicon : public Error { public: using Error::Error; };
class TooFewPatients : public Error { public: using Error::Error; };
class DegenerateClustering : public Error { public: using Error::Error; };
class LengthMismatch : public Error { public: using Error::Error; };
class IoError : public Error { public: using Error::Error; };
class SchemaError : public Error { public: using Error::Error; };
class ConfigError : public Error { public: using Error::Error; };
class BackendError : public Error { public: using Error::Error; };
class UnparsableOutput : public Error { public: using Error::Error; };
class UnknownExpertId : public Error { public: using Error::Error; };

/// 64-bit FNV-1a. Used for fixture keys and source-file fingerprints;
/// not a cryptographic digest.
std::uint64_t fnv1a64(std::string_view data);
std::string fnv1a64_hex(std::string_view data);

std::string to_upper(std::string_view s);
std::string to_lower(std::string_view s);
std::string trim(std::string_view s);
std::vector<std::string> split(std::string_view s, char delim);
std::string join(const std::vector<std::string>& parts, std::string_view sep);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, std::string_view content);

/// Reads a tab-delimited file. Blank lines and lines starting with '#'
/// are skipped. Rows shorter than min_cols raise IoError.
std::vector<std::vector<std::string>> read_tsv(const std::filesystem::path& path,
                                               std::size_t min_cols);

}  // namespace saferx

#endif
