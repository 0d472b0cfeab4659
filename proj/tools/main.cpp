// SPDX-License-Identifier: Apache-2.0
#include "hdwm/cli.hpp"

int main(int argc, char** argv) { return hdwm::cli_main(argc, argv); }
