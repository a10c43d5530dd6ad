// Command-line front end: ingest, build-index, query, bench, scaling,
// leafsize, serve. Exit codes: 0 success, 1 runtime or data error, 2 usage
// or configuration error.
#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace sbc {

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace sbc
