fn main() {
    unimplemented!("command-line interface");
}
