#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace fvlab {

std::string to_lower(std::string_view s);
std::string trim(std::string_view s);
bool contains_ci(std::string_view haystack, std::string_view needle);
bool equals_ci(std::string_view a, std::string_view b);
// Splits on '\n', dropping a trailing '\r' and a final empty line.
std::vector<std::string> split_lines(std::string_view text);

// Locale-independent shortest-ish decimal rendering used by every report.
std::string format_number(double value, int significant = 10);
std::string format_fixed(double value, int decimals);

std::string read_text_file(const std::filesystem::path& path);
// Writes via a temporary sibling and rename, so readers never see a torn file.
void write_text_file(const std::filesystem::path& path, std::string_view contents);

// CSV with a leading "# schema: 1" line. Fields containing commas, quotes or
// newlines are quoted.
class CsvWriter {
public:
    explicit CsvWriter(const std::vector<std::string>& header);

    CsvWriter& row(const std::vector<std::string>& fields);
    const std::string& str() const { return out_; }

private:
    void append(const std::vector<std::string>& fields);

    std::string out_;
    std::size_t width_;
};

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::size_t column(std::string_view name) const;
};

// Parses files produced by CsvWriter ("#" lines are skipped).
CsvTable parse_csv(std::string_view text);

}  // namespace fvlab
