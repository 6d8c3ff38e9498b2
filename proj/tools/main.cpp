// placeholder while the library comes up; replaced by the full CLI
int main() { return 0; }
