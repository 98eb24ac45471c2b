#pragma once

#include <string>
#include <vector>

namespace wilke {

/// Minimal CSV table: header plus rows of cells.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  int column(const std::string& name) const;  // throws if absent
  double number(std::size_t row, const std::string& name) const;
};

CsvTable parse_csv(const std::string& text);

// Every renderer below reads only the CSV text it is given, so rendering the
// same CSV twice yields the same bytes.

/// row,col,value grid as a shaded heatmap (white = 0).
std::string heatmap_svg(const std::string& csv, const std::string& title);

/// step,layer,frobenius_norm,baseline_norm: baseline dashed red, actual solid blue.
std::string norm_trace_svg(const std::string& csv, int layer, const std::string& title);

/// layer,pre_norm,post_norm,...: pre and post norms per edited layer.
std::string sweep_svg(const std::string& csv, const std::string& title);

/// site,layer,token,IE: one heatmap panel per site kind.
std::string cma_svg(const std::string& csv, const std::string& title);

}  // namespace wilke
