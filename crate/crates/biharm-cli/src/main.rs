fn main() {
    println!("biharm");
}
