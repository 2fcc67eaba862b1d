// SPDX-License-Identifier: Apache-2.0
#include "fgad_app/commands.hpp"

int main(int argc, char** argv) { return fgad::app::run_command(argc, argv); }
