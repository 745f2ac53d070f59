// Copyright EMS contributors
// SPDX-License-Identifier: Apache-2.0

#include "ems/cli.hpp"

int main(int argc, char** argv) { return ems::cli::run(std::vector<std::string>(argv + 1, argv + argc)); }
