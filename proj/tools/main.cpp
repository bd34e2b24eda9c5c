#include "app.hpp"

int main(int argc, char** argv) { return lcmigrate::app::run_cli(argc, argv); }
