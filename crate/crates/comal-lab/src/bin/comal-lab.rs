fn main() {
    println!("comal-lab");
}
