// Copyright Contributors to the hogs project
// SPDX-License-Identifier: Apache-2.0
//
#include <hogs/cli.hpp>

int main(int argc, char **argv) { return hogs::run_cli(argc, argv); }
