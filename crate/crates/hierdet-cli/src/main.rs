fn main() {
    println!("hierdet");
}
