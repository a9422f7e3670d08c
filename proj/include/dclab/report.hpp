// SPDX-License-Identifier: Apache-2.0
//
// Deterministic report artifacts: CSV tables and self-contained SVG plots on a
// log-x axis. Every plot carries its data as a comment block so figures diff
// cleanly. Output depends only on the inputs.

#pragma once

#include "dclab/scalinglaw.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace dclab::report {

struct Series {
    std::string label;
    std::vector<scaling::Point> points;
    std::optional<scaling::LawParams> law;  // drawn as a curve plus a dashed asymptote
};

/// Horizontal reference line, labeled "paper reference: <label>". Only for
/// annotation, never a target.
struct Reference {
    std::string label;
    double value = 0.0;
};

struct Plot {
    std::string title;
    std::string x_label;
    std::string y_label = "validation loss";
    std::vector<Series> series;
    std::vector<Reference> references;
};

/// Shortest round-trippable-enough decimal: %.10g.
std::string fmt(double v);

std::string render_svg(const Plot& plot);

struct EfficiencyRow {
    std::string recipe;
    std::string baseline;
    double loss = 0.0;       // recipe loss being matched
    double d = 0.0;          // recipe data size
    double d_equiv = 0.0;    // baseline data needed for the same loss
    double efficiency = 0.0; // d_equiv / d
};

std::string efficiency_csv(const std::vector<EfficiencyRow>& rows);

/// Writes text exactly (no trailing newline added).
void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace dclab::report
