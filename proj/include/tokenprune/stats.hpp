#pragma once

#include <span>
#include <vector>

namespace tokenprune {

double mean(std::span<const double> v);
// Sample standard deviation (n-1 denominator); 0 for n < 2.
double stddev(std::span<const double> v);
double pearson(std::span<const double> x, std::span<const double> y);

// Average ranks (1-based); ties share the mean of their rank run.
std::vector<double> average_ranks(std::span<const double> v);

// Spearman rank correlation with average-rank tie handling. Returns 0 when
// either input has zero rank variance.
double spearman(std::span<const double> x, std::span<const double> y);

}  // namespace tokenprune
