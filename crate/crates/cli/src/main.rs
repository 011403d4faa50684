fn main() {
    println!("captrfuse");
}
