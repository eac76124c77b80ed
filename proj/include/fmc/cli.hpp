#pragma once

#include <ostream>

namespace fmc {

// fmelcodec {encode|decode|train|eval} ...; returns the process exit code.
int run_cli(int argc, const char *const *argv, std::ostream &out, std::ostream &err);

} // namespace fmc
